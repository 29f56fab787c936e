"""urbanplume: 2D urban wind and contaminant dispersion toolkit.

Building footprints (GeoJSON) are turned into boundary-tagged triangle
meshes; a steady wind field is solved with Taylor-Hood finite elements and
Newton's method; contaminant plumes are transported with a stabilized
implicit scheme; and the parametrized wind solve is accelerated with a
POD-Galerkin reduced model hyper-reduced by empirical interpolation.
"""

__version__ = "0.1.0"
