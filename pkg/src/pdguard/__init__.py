"""pdguard: typed personal-data store with consent membranes and a mediated processing pipeline."""

__version__ = "0.1.0"
