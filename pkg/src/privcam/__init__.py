"""End-to-end encrypted camera/IoT recording simulator.

Everything a deployment would split across devices runs here in one
process: a camera node that encrypts and signs what it records, a blob
store that is trusted with nothing, and owner/delegatee clients that
hold the only keys.  Key management is a fixed-depth binary tree of
symmetric keys rotated once per epoch, which makes sharing and deleting
footage a matter of handing out or destroying a handful of tree nodes.
"""

__version__ = "0.1.0"
