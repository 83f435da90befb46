"""Shared cost-accounting primitives.

Runtime instrumentation and the analytical model both count through the
functions here, so their integer equality on a warmed-up graph is
structural rather than coincidental.

Counting conventions (documented once, applied everywhere):

* MACs count convolution/FC/dot-product multiplies only; biases,
  activations, and normalizations are excluded;
* bundle-adjustment geometry uses fixed per-term constants (below) plus a
  closed-form solve count from the unknown dimensions;
* softmax elements (``e_sigma``) count every (edge, channel) pair touched
  by a scatter-softmax aggregation;
* memory counts payload bytes of tensors and graph records (float32 for
  features, float64 for geometry scalars), not allocator overhead.
"""

import numpy as np

# per-term multiply counts of the bundle-adjustment geometry
BA_RESIDUAL_MACS = 16     # backprojection, rotation, projection
BA_JACOBIAN_MACS = 120    # projection Jacobian and its three chain products
BA_ASSEMBLY_MACS = 300    # weighted J^T J / J^T r block contributions

# fixed per-record byte counts of graph bookkeeping fields
PATCH_MISC_BYTES = 8 * 2 + 8      # center (2 x f64) + inverse depth
EDGE_MISC_BYTES = 8 * 2 + 8 * 2 + 8 + 3 * 8  # target, last flow, conf, ids


class MacCounter:
    """Accumulates exact integer multiply-accumulate counts."""

    def __init__(self):
        self.total = 0

    def add(self, n):
        self.total += int(n)

    def reset(self):
        self.total = 0


def ba_iteration_macs(n_terms, n_pose_vars, n_depth_vars):
    """One LM iteration: Jacobian pass, assembly, Schur solve, trial cost."""
    p6 = 6 * n_pose_vars
    solve = (
        p6 * p6 * n_depth_vars        # E C^-1 E^T
        + p6 * n_depth_vars           # E (w / C)
        + p6 ** 3 // 3                # dense solve of the reduced system
        + n_depth_vars * (p6 + 1)     # depth back-substitution
    )
    return n_terms * (2 * BA_RESIDUAL_MACS + BA_JACOBIAN_MACS
                      + BA_ASSEMBLY_MACS) + solve


def ba_solve_macs(n_terms, n_pose_vars, n_depth_vars, iterations):
    """A full ``ba_solve`` call: initial cost plus ``iterations`` LM rounds."""
    return n_terms * BA_RESIDUAL_MACS + iterations * ba_iteration_macs(
        n_terms, n_pose_vars, n_depth_vars)


def patchifier_macs(config):
    """Analytic conv MAC count of one extractor forward pass."""
    from .patchifier import conv_layer_plan, pad16
    ph, pw = pad16(config.height), pad16(config.width)
    total = 0
    for layer in conv_layer_plan(config):
        oh, ow = ph // layer.scale, pw // layer.scale
        total += oh * ow * layer.cout * layer.cin * layer.kernel ** 2
    return total


def featureset_bytes(fs):
    """Payload bytes of one retained feature set."""
    total = fs.mf.nbytes
    if fs.cf is not None:
        total += fs.cf.nbytes
    if fs.pyr is not None:
        total += fs.pyr.nbytes
    if fs.density is not None:
        total += fs.density.nbytes
    return total


def patch_bytes(patch):
    return patch.feature.nbytes + patch.context.nbytes + PATCH_MISC_BYTES


def edge_bytes(edge, config):
    # hidden state plus the transient correlation row the update consumes
    return edge.hidden.nbytes + 4 * config.corr_length + EDGE_MISC_BYTES
