"""Sequential reserve/energy market clearing, preemptive tie-line allocation
and benefit sharing among control areas."""

__version__ = "0.1.0"
