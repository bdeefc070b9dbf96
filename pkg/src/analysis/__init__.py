"""Branch spectra, feature maps, rendering and profiling."""
