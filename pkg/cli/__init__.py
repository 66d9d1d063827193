"""
CLI package for the UWB variational estimation toolkit.
Contains the click command group and its error handlers.
"""
