import pytest

from privcam.identity import IdentityKeypair

# RSA generation dominates test runtime; share long-lived identities.
# Sessions still generate fresh nonces, DH proofs, and seeds per run.


@pytest.fixture(scope="session")
def factory_identity():
    return IdentityKeypair.generate("factory")


@pytest.fixture(scope="session")
def owner_identity():
    return IdentityKeypair.generate("owner")


@pytest.fixture(scope="session")
def camera_op_identity():
    return IdentityKeypair.generate("camera")


@pytest.fixture(scope="session")
def delegatee_identity():
    return IdentityKeypair.generate("delegatee")


@pytest.fixture(scope="session")
def attacker_identity():
    return IdentityKeypair.generate("owner")
