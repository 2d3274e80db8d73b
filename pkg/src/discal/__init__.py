"""Desk-scale lab for calibrated sequence-level distillation of abstractive summarizers.

Submodules:
    corpus       tokenizer, vocabulary, JSONL corpus I/O, synthetic corpus generator
    textmetrics  ROUGE / novel n-gram metrics, calibration scoring and ranking
    seq2seq      miniature encoder-decoder transformer, optimizer, checkpoints
    decoding     beam search, diverse beam search, pseudo-summary generation
    distill      training objectives, distillation methods, evaluation
    cli          command-line driver
"""

__version__ = "0.1.0"
