"""Compositional attribute sliders over a synthetic, exactly invertible
latent world: conditional-prior diffusion, disentanglement training,
slider-quality metrics, an inference service, and a CLI."""

__version__ = "0.1.0"


def _tune_allocator() -> None:
    # Training churns through multi-MB numpy temporaries; without this,
    # glibc mmaps and page-faults each one. Best effort, Linux-only.
    import ctypes
    import sys

    if not sys.platform.startswith("linux"):
        return
    try:
        libc = ctypes.CDLL("libc.so.6", use_errno=True)
        m_mmap_threshold, m_trim_threshold = -3, -1
        libc.mallopt(m_mmap_threshold, 64 * 1024 * 1024)
        libc.mallopt(m_trim_threshold, 128 * 1024 * 1024)
    except OSError:
        pass


_tune_allocator()

