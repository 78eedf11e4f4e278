"""Two-level vehicle trajectory prediction.

A recurrent classifier anticipates the driver's maneuver, the interpreter turns
it into a reference-line initial guess, and a Levenberg-Marquardt solver refines
that guess against a multi-layer cost model of the driving context.
"""

__version__ = "0.1.0"
