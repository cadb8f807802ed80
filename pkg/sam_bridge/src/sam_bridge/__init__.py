"""Box-prompted Segment Anything adapter speaking the MP1 proposer protocol."""

__version__ = "0.1.0"
