"""Face detection inference engine with five-point landmarks.

Subpackages/modules:
    ops        layer math primitives (compiled + numpy backends)
    blocks     composite building blocks (CBS, Stem, C3, SPP, ShuffleV2)
    model      detector assembly, scaling, parameter/FLOP accounting
    head       raw-map decoding, NMS, letterbox inversion
    losses     wing loss and companions with analytic gradients
    datapipe   letterboxing, annotation parsing, seeded augmentations
    evalkit    WiderFace-protocol AP and discrete-ROC TPR
    weights_io portable named-tensor archive + seeded initialization
    cli        detect / eval / info / bench entry points
"""

__version__ = "0.1.0"
