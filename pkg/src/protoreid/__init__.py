"""Person re-identification by projecting features onto learned class prototypes."""

__version__ = "0.1.0"
