"""Power side-channel evaluation of AES-128 on FinFET and NCFET technologies."""

__version__ = "0.1.0"
