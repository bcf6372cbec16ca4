# Utils package for the SVEHNN explanation toolkit
__version__ = "1.0.1"
