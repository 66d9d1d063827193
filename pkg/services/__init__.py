"""
Services package for the UWB variational estimation toolkit.
Contains the Lie group math, noise models, cubature, factor graph, solvers,
simulator, metrics and dataset IO.
"""
