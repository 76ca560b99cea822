from .batching import EncodedDataset, epoch_batches, epoch_order, steps_per_epoch
from .masks import MaskFormatError, polygon_to_mask, rle_decode, rle_encode
from .refcoco import LoadResult, Malformed, ReferSample, load_refcoco_format, write_dataset
from .synth import resolve_referents, synth_generate, synth_vocab
from .tokenizer import Vocab, tokenize, tokenize_batch

__all__ = [
    "EncodedDataset", "LoadResult", "Malformed", "MaskFormatError", "ReferSample", "Vocab",
    "epoch_batches", "epoch_order", "load_refcoco_format", "polygon_to_mask", "resolve_referents",
    "rle_decode", "rle_encode", "steps_per_epoch", "synth_generate", "synth_vocab", "tokenize",
    "tokenize_batch", "write_dataset",
]
