"""Desk-scale speech understanding pipeline: log-mel frontend, frozen encoder,
modality adapter, tag-structured LM with LoRA, three-stage curriculum and
instruction-following evaluation, all on a small numpy autodiff core."""

__version__ = "0.1.0"
