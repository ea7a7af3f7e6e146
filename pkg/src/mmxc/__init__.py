"""Multi-modal extreme multi-label classification engine.

Entities (datapoints and labels) carry bags of textual/visual descriptors.
Shared encoders plus a self-attention block produce bag and unit-vector
embeddings; an augmented approximate-nearest-neighbour index over label
descriptor embeddings and label centroids shortlists candidates; per-label
classifiers blended from label embeddings and free vectors rescore the
shortlist through a cross-attention block, and the two scores are fused
linearly.
"""

__version__ = "0.1.0"
