"""Frequency-domain knowledge distillation on a small numpy autodiff core.

Subpackages and modules:

- ``diffcore``: tensors, tape-based reverse mode, layers, SGD, checkpoints
- ``freqxform``: DWT/DCT/DFT band decompositions with exact inverses
- ``prompt``: learned per-band masks and their stage-one training
- ``distill``: gated, masked band-space imitation loss and stage-two training
- ``toybench``: procedural segmentation scenes and encoder-decoder networks
- ``cli``: the experiment driver
"""

__version__ = "0.1.0"
