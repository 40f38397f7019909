"""pvdiff: a desk-scale multimodal diffusion policy.

Point clouds are tokenized with FPS + KNN grouping, images become FiLM
conditioned global/local tokens, three fusion strategies combine the
modalities (plain concatenation or AdaLN conditioning on either side), and
a transformer diffusion policy denoises action chunks with a 4-step
deterministic sampler. Everything learnable runs on the numpy autodiff
core in pvdiff.autodiff.
"""

__version__ = "0.1.0"
