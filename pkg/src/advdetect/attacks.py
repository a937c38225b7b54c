"""
White-box attacks: FGSM, PGD, JSMA and Carlini-Wagner L2.

All attacks read the classifier through its differentiable ``forward`` and
never modify it. Pixel arithmetic (steps, projections, clipping) is done in
float64 so the L-inf and L0 bounds hold to within 1e-9 regardless of the
network's dtype; only the gradient evaluations run at model precision.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from . import artifacts
from .types import AttackConfig, ConfigError, Family, RangeError, SizeError, TargetRule, validate_batch, validate_labels

log = logging.getLogger(__name__)


@dataclass
class AdversarialBatch:
    adv: np.ndarray
    source_indices: np.ndarray
    config: AttackConfig
    success_mask: np.ndarray
    targets: np.ndarray

    def __len__(self):
        return len(self.adv)


def _f64(x):
    return torch.as_tensor(np.asarray(x), dtype=torch.float64)


def _ce_grad(model, x64, y, reduction="sum"):
    x = x64.detach().to(model.dtype, copy=True).requires_grad_(True)
    loss = F.cross_entropy(model.forward(x), y, reduction=reduction)
    (g,) = torch.autograd.grad(loss, x)
    return g.to(torch.float64)


def _as_long(y):
    return torch.as_tensor(np.asarray(y), dtype=torch.long)


def fgsm(model, x, y, epsilon: float, targeted=False) -> np.ndarray:
    """
    One signed-gradient step of size ``epsilon`` on the cross-entropy loss of
    label ``y``, then clip to [0, 1]. With ``targeted`` the step descends the
    loss of ``y`` (read as the target) instead.
    """
    if epsilon < 0:
        raise RangeError("epsilon must be >= 0")
    validate_batch(x)
    x64 = _f64(x)
    g = _ce_grad(model, x64, _as_long(y))
    step = -1.0 if targeted else 1.0
    return torch.clamp(x64 + step * epsilon * torch.sign(g), 0.0, 1.0).numpy()


def pgd(model, x, y, cfg: AttackConfig, generator: torch.Generator | None = None, targeted=False) -> np.ndarray:
    """
    Iterated signed-gradient steps of size ``cfg.alpha``; after each step the
    iterate is projected back onto the eps-ball around ``x`` and onto [0, 1].
    """
    if cfg.alpha <= 0 or cfg.steps < 1 or cfg.epsilon < 0:
        raise ConfigError("PGD needs alpha > 0, steps >= 1, epsilon >= 0")
    validate_batch(x)
    x64 = _f64(x)
    y = _as_long(y)
    eps = cfg.epsilon
    lo = torch.clamp(x64 - eps, 0.0, 1.0)
    hi = torch.clamp(x64 + eps, 0.0, 1.0)
    adv = x64.clone()
    if cfg.random_start and eps > 0:
        noise = torch.rand(x64.shape, generator=generator, dtype=torch.float64) * 2 - 1
        adv = torch.minimum(torch.maximum(x64 + eps * noise, lo), hi)
    step = -1.0 if targeted else 1.0
    for _ in range(cfg.steps):
        g = _ce_grad(model, adv, y)
        adv = adv + step * cfg.alpha * torch.sign(g)
        adv = torch.minimum(torch.maximum(adv, x64 - eps), x64 + eps)
        adv = torch.clamp(adv, 0.0, 1.0)
    return adv.numpy()


def _jsma_pair_scores(alpha, beta, increase):
    """
    Saliency of every feature pair: alpha/beta are (n, k) target / other-class
    gradients. Returns (n, k, k) scores, -inf where the pair is not admissible.
    """
    a = alpha[:, :, None] + alpha[:, None, :]
    b = beta[:, :, None] + beta[:, None, :]
    if increase:
        ok = (a > 0) & (b < 0)
    else:
        ok = (a < 0) & (b > 0)
    score = torch.where(ok, -a * b, torch.full_like(a, -torch.inf))
    k = alpha.shape[1]
    diag = torch.eye(k, dtype=torch.bool).expand_as(score)
    return score.masked_fill(diag, -torch.inf)


def jsma(model, x, target, theta_mag: float = 1.0, gamma: float = 0.1, candidates: int | None = 64) -> np.ndarray:
    """
    Targeted Jacobian saliency map attack, pairwise variant.

    Each iteration picks the admissible feature pair (p, q) maximising
    ``-(a_p + a_q) * (b_p + b_q)`` where ``a`` is the gradient of the target
    logit and ``b`` the gradient of the summed other logits, moves both by
    ``theta_mag`` (clipped to [0, 1]) and retires them from the search
    domain. A sample stops once it is classified as the target or after
    ``floor(gamma * D / 2)`` iterations, D = h*w*c, so at most ``gamma * D``
    features ever change.

    ``candidates`` restricts the pair search each iteration to the features
    with the largest ``|a - b|`` in the admissible direction; ``None`` searches
    all pairs.
    """
    if not 0.0 <= gamma <= 1.0:
        raise RangeError("gamma must lie in [0, 1]")
    validate_batch(x)
    x64 = _f64(x)
    n = x64.shape[0]
    shape = x64.shape[1:]
    d = int(np.prod(shape))
    t = _as_long(target)
    increase = theta_mag >= 0
    max_iters = int(np.floor(d * gamma / 2))

    adv = x64.reshape(n, d).clone()
    if increase:
        domain = adv < 1.0
    else:
        domain = adv > 0.0
    active = torch.ones(n, dtype=torch.bool)

    for _ in range(max_iters):
        idx = torch.nonzero(active).flatten()
        if len(idx) == 0:
            break
        xa = adv[idx].reshape((len(idx),) + tuple(shape)).to(model.dtype).requires_grad_(True)
        z = model.forward(xa)
        pred = z.argmax(1)
        ta = t[idx]
        hit = pred == ta
        z_t = z.gather(1, ta[:, None]).sum()
        (ga,) = torch.autograd.grad(z_t, xa, retain_graph=True)
        (gall,) = torch.autograd.grad(z.sum(), xa)
        a = ga.reshape(len(idx), d).to(torch.float64)
        b = gall.reshape(len(idx), d).to(torch.float64) - a

        dom = domain[idx]
        if candidates is not None and candidates < d:
            pref = (a - b) if increase else (b - a)
            pref = pref.masked_fill(~dom, -torch.inf)
            cand = pref.topk(candidates, dim=1).indices
        else:
            cand = torch.arange(d).expand(len(idx), d)
        ca, cb = a.gather(1, cand), b.gather(1, cand)
        cdom = dom.gather(1, cand)
        ca = ca.masked_fill(~cdom, 0.0)
        cb = cb.masked_fill(~cdom, 0.0)
        score = _jsma_pair_scores(ca, cb, increase)
        score = score.masked_fill(~(cdom[:, :, None] & cdom[:, None, :]), -torch.inf)
        flat = score.reshape(len(idx), -1)
        best = flat.argmax(1)
        valid = torch.isfinite(flat.gather(1, best[:, None]).squeeze(1))
        k = cand.shape[1]
        p = cand.gather(1, (best // k)[:, None]).squeeze(1)
        q = cand.gather(1, (best % k)[:, None]).squeeze(1)

        move = valid & ~hit
        rows = idx[move]
        for feat in (p[move], q[move]):
            adv[rows, feat] = torch.clamp(adv[rows, feat] + theta_mag, 0.0, 1.0)
            domain[rows, feat] = False
        active[idx[~move]] = False
        active[idx[move]] = domain[idx[move]].sum(1) >= 2
    return adv.reshape((n,) + tuple(shape)).numpy()


def _cw_diff(z, t, targeted):
    """``max_{i != t} Z_i - Z_t`` (targeted) or ``Z_t - max_{i != t} Z_i``; negative means success."""
    z_t = z.gather(1, t[:, None]).squeeze(1)
    other = z.masked_fill(F.one_hot(t, z.shape[1]).bool(), -torch.inf).amax(1)
    return other - z_t if targeted else z_t - other


def cw(
    model, x, target, confidence: float = 0.0, lr=1e-2, iters=100, initial_c=1e-2, binary_search_steps=5, targeted=True, abort_early=True
) -> tuple[np.ndarray, np.ndarray]:
    """
    Carlini-Wagner L2 attack.

    Minimises ``||delta||_2^2 + c * max(max_{i!=t} Z_i - Z_t, -confidence)``
    over a tanh-reparameterised image with Adam, and binary-searches ``c``
    per sample. Returns ``(adv, success)``; for samples that never succeed the
    iterate with the smallest hinge value is returned.

    With ``abort_early`` a binary-search step ends once the batch loss has not
    dropped by 0.01% over the last tenth of ``iters``.
    """
    if iters < 1 or lr <= 0 or binary_search_steps < 1:
        raise ConfigError("CW needs iters >= 1, lr > 0 and binary_search_steps >= 1")
    if confidence < 0:
        raise ConfigError("confidence must be >= 0")
    validate_batch(x)
    x64 = _f64(x)
    n = len(x64)
    t = _as_long(target)
    flat_dims = tuple(range(1, x64.dim()))

    lower = torch.zeros(n, dtype=torch.float64)
    upper = torch.full((n,), 1e10, dtype=torch.float64)
    c = torch.full((n,), float(initial_c), dtype=torch.float64)
    best_l2 = torch.full((n,), torch.inf, dtype=torch.float64)
    best_adv = x64.clone()
    fallback_margin = torch.full((n,), torch.inf, dtype=torch.float64)
    fallback_adv = x64.clone()

    # delta = 0 is optimal when x already meets the target with margin
    with torch.no_grad():
        d0 = _cw_diff(model.forward(x64.to(model.dtype)), t, targeted).to(torch.float64)
    done0 = d0 < -confidence
    best_l2[done0] = 0.0

    w0 = torch.atanh((x64 * 2 - 1) * 0.999999)
    todo = ~done0
    for _ in range(binary_search_steps):
        if not todo.any():
            break
        idx = torch.nonzero(todo).flatten()
        w = w0[idx].to(model.dtype).clone().requires_grad_(True)
        xi = x64[idx].to(model.dtype)
        ti, ci = t[idx], c[idx].to(model.dtype)
        opt = torch.optim.Adam([w], lr=lr)
        step_success = torch.zeros(len(idx), dtype=torch.bool)
        check_every = max(iters // 10, 1)
        prev_loss = np.inf
        for it in range(iters):
            adv = (torch.tanh(w) + 1) / 2
            l2 = (adv - xi).pow(2).sum(flat_dims)
            z = model.forward(adv)
            diff = _cw_diff(z, ti, targeted)
            loss = (l2 + ci * torch.clamp(diff, min=-confidence)).sum()
            opt.zero_grad()
            loss.backward()
            with torch.no_grad():
                adv64 = adv.detach().to(torch.float64)
                l2_64 = (adv64 - x64[idx]).pow(2).sum(flat_dims)
                m64 = diff.detach().to(torch.float64)
                ok = m64 < -confidence
                better = ok & (l2_64 < best_l2[idx])
                best_l2[idx[better]] = l2_64[better]
                best_adv[idx[better]] = adv64[better]
                step_success |= ok
                closer = m64 < fallback_margin[idx]
                fallback_margin[idx[closer]] = m64[closer]
                fallback_adv[idx[closer]] = adv64[closer]
            if abort_early and (it + 1) % check_every == 0:
                if loss.item() > prev_loss * 0.9999:
                    break
                prev_loss = loss.item()
            opt.step()
        cs = c[idx]
        up, lo = upper[idx], lower[idx]
        up = torch.where(step_success, torch.minimum(up, cs), up)
        lo = torch.where(step_success, lo, torch.maximum(lo, cs))
        cs = torch.where(up < 1e9, (lo + up) / 2, cs * 10)
        upper[idx], lower[idx], c[idx] = up, lo, cs

    success = torch.isfinite(best_l2)
    out = torch.where(success.view(-1, *[1] * (x64.dim() - 1)), best_adv, fallback_adv)
    return torch.clamp(out, 0.0, 1.0).numpy(), success.numpy()


def resolve_targets(labels, cfg: AttackConfig, num_classes: int) -> np.ndarray:
    labels = np.asarray(labels)
    if cfg.target_rule is TargetRule.NEXT_CLASS:
        return (labels + 1) % num_classes
    if cfg.target_rule is TargetRule.FIXED:
        if not 0 <= cfg.fixed_target < num_classes:
            raise ConfigError(f"fixed target {cfg.fixed_target} outside [0, {num_classes})")
        return np.full_like(labels, cfg.fixed_target)
    return labels.copy()


def _run_attack(model, xb, yb, tb, cfg, gen):
    targeted = cfg.target_rule is not TargetRule.UNTARGETED
    lab = tb if targeted else yb
    if cfg.family is Family.FGSM:
        return fgsm(model, xb, lab, cfg.epsilon, targeted=targeted)
    if cfg.family is Family.PGD:
        return pgd(model, xb, lab, cfg, generator=gen, targeted=targeted)
    if cfg.family is Family.JSMA:
        if not targeted:
            raise ConfigError("JSMA is implemented as a targeted attack only")
        return jsma(model, xb, tb, cfg.theta_mag, cfg.gamma, cfg.jsma_candidates)
    adv, _ = cw(
        model, xb, lab, cfg.confidence, cfg.cw_lr, cfg.cw_iters, cfg.cw_initial_c, cfg.cw_binary_steps,
        targeted=targeted, abort_early=cfg.cw_abort_early,
    )
    return adv


def generate_attack_set(model, clean, labels, cfg: AttackConfig, seed: int = 0, source_indices=None, verbose=False) -> AdversarialBatch:
    """
    Attack every sample of ``clean`` in mini-batches of ``cfg.batch_size``.

    Targets come from ``cfg.target_rule`` (NEXT_CLASS: ``(y + 1) mod K``).
    ``success_mask`` is True where the attacked model's prediction hits the
    target (targeted) or leaves the true label (untargeted).
    """
    validate_batch(clean)
    labels = validate_labels(labels, len(clean), model.num_classes)
    targets = resolve_targets(labels, cfg, model.num_classes)
    gen = torch.Generator().manual_seed(int(seed))
    torch.manual_seed(int(seed))
    out = np.empty(clean.shape, dtype=np.float64)
    n = len(clean)
    for start in range(0, n, cfg.batch_size):
        sl = slice(start, min(start + cfg.batch_size, n))
        out[sl] = _run_attack(model, clean[sl], labels[sl], targets[sl], cfg, gen)
        if verbose:
            print(f"{cfg.family.value}: {sl.stop}/{n}")
        log.debug("%s %d/%d", cfg.family.value, sl.stop, n)

    from .classifiers import predict

    pred = predict(model, out)
    if cfg.target_rule is TargetRule.UNTARGETED:
        success = pred != labels
    else:
        success = pred == targets
    idx = np.arange(n) if source_indices is None else np.asarray(source_indices)
    if len(idx) != n:
        raise SizeError("source_indices must match the number of clean samples")
    return AdversarialBatch(out, idx, cfg, success, targets)


def save_attack_set(batch: AdversarialBatch, path, seed: int, inputs: dict | None = None, extra: dict | None = None) -> dict:
    with open(path, "wb") as f:
        np.savez(f, adv=batch.adv, clean_indices=batch.source_indices, success_mask=batch.success_mask, targets=batch.targets)
    meta = {"kind": "attack_set", "attack": batch.config.to_dict(), "seed": int(seed), "n": len(batch)}
    meta.update(extra or {})
    return artifacts.write_sidecar(path, meta, inputs)


def load_attack_set(path, check=True) -> AdversarialBatch:
    meta = artifacts.verify(path) if check else artifacts.read_sidecar(path)
    with np.load(path) as z:
        return AdversarialBatch(
            z["adv"], z["clean_indices"], AttackConfig.from_dict(meta["attack"]), z["success_mask"], z["targets"]
        )
