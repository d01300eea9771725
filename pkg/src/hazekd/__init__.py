"""hazekd: lightweight single-image dehazing trained with feature-affinity
distillation from a frozen super-resolution teacher.

Built on a small NumPy tensor core with reverse-mode autodiff; see the
module docstrings for the pieces: ``tensor`` (autodiff ops), ``nn`` (layers),
``data`` (haze synthesis and image I/O), ``teacher`` / ``student`` (the two
networks), ``distill`` (feature-affinity losses), ``train`` (optimizer and
loops), ``metrics`` (PSNR/SSIM and compute benchmarking), ``cli``.
"""

__version__ = "0.1.0"
