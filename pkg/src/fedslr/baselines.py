"""Reference methods on the same client/model stack: FedAvg, proximal steps
inside local training (LPGD), and a proximal step at the server only (GPGD)."""

from typing import Optional, Sequence

from .core import DivergenceError, HyperParams, client_rng, phase1_grad, prox_layers
from .reshape import ParamSet, mean_params


def _local_sgd(obj, w0: ParamSet, hp: HyperParams, rng, lr: float, prox_tau: Optional[float] = None):
    w = w0.copy()
    for k in range(hp.K_local):
        w = w - lr * phase1_grad(obj, w, hp.weight_decay, rng, hp.batch_size)
        if prox_tau is not None:
            w, _ = prox_layers(w, prox_tau)
        if not w.is_finite():
            raise DivergenceError("local training", k)
    return w


def _locals(server_w, objectives, hp, selection, seed, round_idx, prox_tau=None):
    lr = hp.local_lr(round_idx)
    selection = range(len(objectives)) if selection is None else sorted(selection)
    return [_local_sgd(objectives[i], server_w, hp, client_rng(seed, i, round_idx, 1), lr, prox_tau)
            for i in selection]


def fedavg_round(server_w: ParamSet, objectives: Sequence, hp: HyperParams,
                 selection=None, seed: int = 0, round_idx: int = 0) -> ParamSet:
    """``K_local`` SGD steps per selected client, then the plain mean."""
    return mean_params(_locals(server_w, objectives, hp, selection, seed, round_idx))


def lpgd_round(server_w: ParamSet, objectives: Sequence, hp: HyperParams,
               selection=None, seed: int = 0, round_idx: int = 0, return_locals: bool = False):
    """Every local step is a proximal gradient step; the server averages.

    The average of low-rank client models is generally not low-rank.
    """
    lr = hp.local_lr(round_idx)
    locals_ = _locals(server_w, objectives, hp, selection, seed, round_idx, prox_tau=lr * hp.lam)
    w = mean_params(locals_)
    return (w, locals_) if return_locals else w


def gpgd_round(server_w: ParamSet, objectives: Sequence, hp: HyperParams,
               selection=None, seed: int = 0, round_idx: int = 0, return_ranks: bool = False):
    """FedAvg local phase followed by ``Prox_{lr * lambda}`` of the mean."""
    lr = hp.local_lr(round_idx)
    w, ranks = prox_layers(mean_params(_locals(server_w, objectives, hp, selection, seed, round_idx)),
                           lr * hp.lam)
    return (w, ranks) if return_ranks else w
