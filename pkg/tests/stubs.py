"""Deterministic stand-ins for trained networks."""

import numpy as np

from cascade_seg.inference import extract_block


class ConstantStub:
    def __init__(self, value, in_channels=4, side=32):
        self.value, self.in_channels, self.side = value, in_channels, side

    def predict_patches(self, patches, corners):
        return np.full((len(patches),) + (self.side,) * 3, self.value)


class CornerParityStub:
    """1 where the corner's coordinates, in units of 16 voxels, sum to an even number; else 0."""

    def __init__(self, in_channels=1):
        self.in_channels = in_channels

    def predict_patches(self, patches, corners):
        parity = ((np.asarray(corners) // 16).sum(axis=1) % 2 == 0).astype(float)
        return np.broadcast_to(parity[:, None, None, None], (len(patches),) + patches.shape[2:]).copy()


class ContentStub:
    """A fixed nonlinear function of each patch's voxels and its corner."""

    def __init__(self, in_channels=2):
        self.in_channels = in_channels

    def predict_patches(self, patches, corners):
        c = np.asarray(corners, dtype=float)
        bias = np.sin(c.sum(axis=1) / 7.0)[:, None, None, None]
        z = patches[:, 0] + 0.5 * patches[:, -1] * bias
        return 1.0 / (1.0 + np.exp(-z))


class OracleStub:
    """Returns the block of a fixed binary mask under each patch."""

    def __init__(self, mask, in_channels):
        self.mask = np.asarray(mask, dtype=float)
        self.in_channels = in_channels

    def predict_patches(self, patches, corners):
        side = patches.shape[-1]
        return np.stack([extract_block(self.mask, c, side, 0.0) for c in corners])


def oracle_models(subject, cfg):
    """Stage stubs that each return the subject's ground-truth target region."""
    from cascade_seg.cascade import STAGE_TARGET, STAGES, derive_training_targets, working_grid

    models = {}
    for name in STAGES:
        stage = cfg.stage(name)
        work = working_grid(subject, stage.spacing)
        region = derive_training_targets(work.truth, cfg.tc_convention).as_dict()[STAGE_TARGET[name]]
        models[name] = OracleStub(region.data, stage.in_channels)
    return models


def brute_force_predict(stub, volumes, offsets, side=32, fill=0.0):
    """Independent stitching: pad once, enumerate every tile, average per voxel."""
    arr = np.stack([np.asarray(v, dtype=np.float32) for v in volumes])
    shape = arr.shape[1:]
    padded = np.pad(arr, [(0, 0)] + [(side, side)] * 3, constant_values=fill)
    total = np.zeros(shape)
    count = np.zeros(shape)
    for off in offsets:
        starts = []
        for o, n in zip(off, shape):
            s = o
            while s > 0:
                s -= side
            axis = []
            while s < n:
                axis.append(s)
                s += side
            starts.append(axis)
        for x in starts[0]:
            for y in starts[1]:
                for z in starts[2]:
                    block = padded[:, x + side : x + 2 * side, y + side : y + 2 * side, z + side : z + 2 * side]
                    out = stub.predict_patches(block[None], np.array([[x, y, z]]))[0]
                    for i in range(side):
                        if not 0 <= x + i < shape[0]:
                            continue
                        xs = slice(max(y, 0), min(y + side, shape[1]))
                        zs = slice(max(z, 0), min(z + side, shape[2]))
                        total[x + i, xs, zs] += out[i, xs.start - y : xs.stop - y, zs.start - z : zs.stop - z]
                        count[x + i, xs, zs] += 1
    return total / count
