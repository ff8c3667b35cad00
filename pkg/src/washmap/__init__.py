"""Grid-level WASH access estimation from rasters, POIs and census blocks."""

__version__ = "0.1.0"
