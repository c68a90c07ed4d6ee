"""Shared model builders for tests."""

import numpy as np

from halo.quantizer import LOW_CLASS, FrequencyClass, QuantizedModel, SparseOverlay, quantize_tile


def single_class_model(W, codebook, tile=4):
    rows, cols = W.shape
    gr, gc = -(-rows // tile), -(-cols // tile)
    padded = np.zeros((gr * tile, gc * tile))
    padded[:rows, :cols] = W
    values = np.zeros((gr, gc, tile, tile), dtype=np.int8)
    scales = np.zeros(gr * gc, dtype=np.float32)
    for i in range(gr):
        for j in range(gc):
            idx, s = quantize_tile(padded[i * tile:(i + 1) * tile, j * tile:(j + 1) * tile], codebook)
            values[i, j] = np.asarray(codebook)[idx]
            scales[i * gc + j] = s
    empty = SparseOverlay((rows, cols), np.zeros(rows + 1), [], [], np.ones(rows))
    cls = FrequencyClass(LOW_CLASS, "only", 3.7, codebook)
    return QuantizedModel((rows, cols), (tile, tile), (cls,), np.zeros(gr * gc, dtype=np.int8),
                          values, scales, empty)
