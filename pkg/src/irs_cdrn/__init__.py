"""Channel estimation for IRS-assisted multi-user uplinks: pilot protocol, LS/LMMSE, CDRN."""

__version__ = "0.1.0"
