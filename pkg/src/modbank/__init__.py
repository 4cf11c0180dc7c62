"""Online adaptation of a frozen toy LM via a memory bank of amortized
document modulations."""

__version__ = "0.1.0"
