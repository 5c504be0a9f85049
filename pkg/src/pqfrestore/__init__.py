"""Two-stage compressed video restoration: a PQF-guided recurrent video
network, a windowed-attention per-frame refiner, progressive training,
self-ensemble inference and PSNR reporting."""

__version__ = "0.1.0"
