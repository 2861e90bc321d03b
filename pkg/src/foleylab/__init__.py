"""Video-guided Foley sound generation with multimodal controls.

A latent diffusion pipeline for generating soundtracks synchronized to
silent video: a variational audio codec, a diffusion transformer
conditioned on per-frame video features (channel concatenation) and text
(cross-attention), masked conditional training, and classifier-free
guidance with negative prompting. Ships with a procedural audio/video/text
corpus generator and an evaluation suite so the whole system trains and
validates on one CPU.
"""

__version__ = "0.1.0"
