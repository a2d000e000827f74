# CoBERL desk-scale agent
__version__ = "1.0.0"
