"""Two-stream Transformer freespace detection on LiDAR + RGB, from first principles."""

__version__ = "0.1.0"
