"""fewdiff: diffusion-pretrained multimodal patch classification with
language-driven few-shot fine-tuning, on a self-contained numpy autodiff
stack with optional compiled kernels."""

__version__ = "0.1.0"
