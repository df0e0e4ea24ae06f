"""Guided diffusion posterior sampling over a simulated OFDM multipath link.

Subpackages follow the processing chain: `schedule` (VP diffusion),
`priors` (analytic/learned scores), `autodiff` (tape gradients), `ofdm`
(the wireless operator), `codec` (encoder/decoder pairs), `samplers`
(the three decoding algorithms), `metrics` (oracles and fidelity
measures) and `harness` (seeded experiments and CSV output).
"""

from .kernels import HAVE_COMPILED

__all__ = ["HAVE_COMPILED"]
__version__ = "0.1.0"
