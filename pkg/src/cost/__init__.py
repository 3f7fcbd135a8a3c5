"""Semantic tokenization and generative retrieval, end to end at desk scale.

Pipeline: item embeddings -> residual-quantization tokenizer (reconstructive,
contrastive, or combined objective) -> discrete token assignment -> seq2seq
token generator -> beam-search retrieval -> leave-one-out Recall/NDCG.
"""

__version__ = "0.1.0"
