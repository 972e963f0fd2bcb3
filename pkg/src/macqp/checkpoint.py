"""Versioned binary model checkpoints ("MACN" format).

Layout, all little-endian:
  magic "MACN", format version u32, layer count u32,
  per layer: kind u8 (0=sigmoid-dense, 1=linear-dense, 2=gaussian-rbf),
             in_dim u32, out_dim u32,
             hyperparams as f64: rbf_width, ridge, bias flag (0.0/1.0),
             weights row-major f64,
  placement count u32, placement indices u32.
"""

import struct

import numpy as np

from .model import Layer, LayerKind, LayerSpec, LayerWeights, MacqpError, NestedNet

MACN_MAGIC = b"MACN"
FORMAT_VERSION = 1

_KIND_CODES = {
    LayerKind.SIGMOID_DENSE: 0,
    LayerKind.LINEAR_DENSE: 1,
    LayerKind.GAUSSIAN_RBF: 2,
}
_CODE_KINDS = {v: k for k, v in _KIND_CODES.items()}


def save_model(net, path):
    with open(path, "wb") as fh:
        fh.write(MACN_MAGIC)
        fh.write(struct.pack("<II", FORMAT_VERSION, len(net.layers)))
        for layer in net.layers:
            spec = layer.spec
            fh.write(
                struct.pack(
                    "<BIIddd",
                    _KIND_CODES[spec.kind],
                    spec.in_dim,
                    spec.out_dim,
                    spec.rbf_width,
                    spec.ridge,
                    1.0 if spec.bias else 0.0,
                )
            )
            fh.write(np.ascontiguousarray(layer.weights.matrix, dtype="<f8").tobytes())
        fh.write(struct.pack("<I", len(net.placement)))
        for p in net.placement:
            fh.write(struct.pack("<I", p))


def load_model(path):
    with open(path, "rb") as fh:
        if fh.read(4) != MACN_MAGIC:
            raise MacqpError(f"{path}: not a model checkpoint")
        version, n_layers = struct.unpack("<II", fh.read(8))
        if version != FORMAT_VERSION:
            raise MacqpError(f"{path}: unsupported format version {version}")
        layers = []
        for _ in range(n_layers):
            code, in_dim, out_dim, width, ridge, bias = struct.unpack(
                "<BIIddd", fh.read(33)
            )
            spec = LayerSpec(
                _CODE_KINDS[code], in_dim, out_dim,
                rbf_width=width, ridge=ridge, bias=bias != 0.0,
            )
            count = spec.weight_shape[0] * spec.weight_shape[1]
            mat = np.frombuffer(fh.read(8 * count), dtype="<f8").reshape(spec.weight_shape)
            layers.append(Layer(spec, LayerWeights(mat.copy())))
        (n_placed,) = struct.unpack("<I", fh.read(4))
        placement = [struct.unpack("<I", fh.read(4))[0] for _ in range(n_placed)]
    return NestedNet(layers, placement)
