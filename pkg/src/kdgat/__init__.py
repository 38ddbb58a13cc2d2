"""Knowledge-distilled graph attention networks for CAN bus intrusion detection."""

__version__ = "0.1.0"
