"""Knowledge-graph question answering by path walking, with a learned option to abstain."""
__version__ = "0.1.0"
