"""Graph attention layers and two-stage metapath propagation.

Per head, attention over a target t's neighbor set N_t is

    alpha_tj = softmax_j( LeakyReLU( a^T [W e_t || W e_j] ) )
    h_t      = sum_j alpha_tj W e_j

Multi-head layers split W and a into per-head slices and concatenate the
head outputs. Propagation runs in two stages over shared trainable node
embeddings (users, items, user factors, item factors, all with one dim):

  stage 1 (semantic): two chained GAT hops with separate layers realize the
  entity->factor->entity paths; each target entity also receives a self
  edge carrying its raw embedding, so factor-less nodes keep a signal.
  Inactive semantic paths fall back to the raw embeddings.

  stage 2 (interaction): per side, one GAT whose source table is the
  concatenation of both sides' stage-1 outputs; a user aggregates its
  sampled interacted items' rows plus its own. Inactive interaction paths
  pass the stage-1 output through unchanged.

Every forward caches enough to run an exact hand-written backward.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .graph import Metapath
from .numerics import (EmptyNeighborhoodError, Parameter, Rng, glorot,
                       leaky_relu, leaky_relu_grad)


class GatLayer:
    """Single graph-attention layer with explicit backward."""

    def __init__(self, dim_in: int, dim_out: int, rng: Rng, name: str,
                 heads: int = 1, slope: float = 0.2):
        if dim_out % heads != 0:
            raise ValueError(f"dim_out {dim_out} not divisible by heads {heads}")
        self.dim_in = dim_in
        self.dim_out = dim_out
        self.heads = heads
        self.head_dim = dim_out // heads
        self.slope = slope
        self.W = glorot(rng.derive("W"), (dim_out, dim_in), f"{name}.W")
        self.a = glorot(rng.derive("a"), (2 * dim_out,), f"{name}.a")

    @property
    def params(self):
        return [self.W, self.a]

    def forward(self, tgt_emb: np.ndarray, src_emb: np.ndarray,
                tgt_rows: np.ndarray, nbr_lists):
        """Aggregate neighbors for each target.

        tgt_rows indexes rows of tgt_emb; nbr_lists[k] holds source-row
        indices for target k. Returns (H, attention (heads, E), cache).
        """
        n_t = len(tgt_rows)
        if n_t == 0:
            empty = np.zeros((0, self.dim_out), dtype=tgt_emb.dtype)
            return empty, np.zeros((self.heads, 0), dtype=tgt_emb.dtype), None
        lengths = np.fromiter((len(x) for x in nbr_lists), dtype=np.int64,
                              count=n_t)
        if (lengths == 0).any():
            raise EmptyNeighborhoodError(
                "GAT target with no neighbors (self-inclusion disabled?)")
        offsets = np.zeros(n_t, dtype=np.int64)
        np.cumsum(lengths[:-1], out=offsets[1:])
        src_idx = np.concatenate([np.asarray(x, dtype=np.int64)
                                  for x in nbr_lists])
        seg = np.repeat(np.arange(n_t), lengths)

        d = self.head_dim
        tgt_in = tgt_emb[tgt_rows]
        H = np.empty((n_t, self.dim_out), dtype=tgt_emb.dtype)
        alphas = np.empty((self.heads, len(src_idx)), dtype=tgt_emb.dtype)
        head_caches = []
        for h in range(self.heads):
            Wh = self.W.value[h * d:(h + 1) * d]
            a_t = self.a.value[2 * h * d:2 * h * d + d]
            a_s = self.a.value[2 * h * d + d:2 * (h + 1) * d]
            zt = tgt_in @ Wh.T
            zs = src_emb @ Wh.T
            pre = zt @ a_t
            pre = pre[seg] + (zs @ a_s)[src_idx]
            act = leaky_relu(pre, self.slope)
            mx = np.maximum.reduceat(act, offsets)
            ex = np.exp(act - mx[seg])
            denom = np.add.reduceat(ex, offsets)
            alpha = ex / denom[seg]
            zs_e = zs[src_idx]
            H[:, h * d:(h + 1) * d] = np.add.reduceat(
                alpha[:, None] * zs_e, offsets, axis=0)
            alphas[h] = alpha
            head_caches.append((zt, zs, pre, alpha))
        cache = {
            "tgt_rows": np.asarray(tgt_rows, dtype=np.int64),
            "src_idx": src_idx, "seg": seg, "offsets": offsets,
            "tgt_in": tgt_in, "src_emb": src_emb, "heads": head_caches,
            "n_src": src_emb.shape[0],
        }
        return H, alphas, cache

    def backward(self, cache, dH: np.ndarray):
        """Accumulates W/a gradients; returns (d_tgt_emb_rows, d_src_emb).

        d_tgt_emb_rows aligns with cache['tgt_rows'] (one row per target);
        d_src_emb has the full source-table shape.
        """
        if cache is None:
            if dH.shape[0] != 0:
                raise RuntimeError("stale GAT cache")
            return (np.zeros((0, self.dim_in), dtype=dH.dtype), None)
        seg, src_idx = cache["seg"], cache["src_idx"]
        offsets = cache["offsets"]
        tgt_in, src_emb = cache["tgt_in"], cache["src_emb"]
        d = self.head_dim
        d_tgt = np.zeros_like(tgt_in)
        d_src = np.zeros_like(src_emb)
        for h in range(self.heads):
            Wh = self.W.value[h * d:(h + 1) * d]
            a_t = self.a.value[2 * h * d:2 * h * d + d]
            a_s = self.a.value[2 * h * d + d:2 * (h + 1) * d]
            zt, zs, pre, alpha = cache["heads"][h]
            dH_h = dH[:, h * d:(h + 1) * d]
            zs_e = zs[src_idx]

            dalpha = (dH_h[seg] * zs_e).sum(axis=1)
            dzs = np.zeros_like(zs)
            np.add.at(dzs, src_idx, alpha[:, None] * dH_h[seg])
            # softmax backward within each target segment
            S = np.add.reduceat(alpha * dalpha, offsets)
            dact = alpha * (dalpha - S[seg])
            dpre = dact * leaky_relu_grad(pre, self.slope)
            dst = np.add.reduceat(dpre, offsets)
            dss = np.zeros(cache["n_src"], dtype=dpre.dtype)
            np.add.at(dss, src_idx, dpre)

            self.a.grad[2 * h * d:2 * h * d + d] += zt.T @ dst
            self.a.grad[2 * h * d + d:2 * (h + 1) * d] += zs.T @ dss
            dzt = dst[:, None] * a_t[None, :]
            dzs += dss[:, None] * a_s[None, :]
            self.W.grad[h * d:(h + 1) * d] += dzt.T @ tgt_in + dzs.T @ src_emb
            d_tgt += dzt @ Wh
            d_src += dzs @ Wh
        return d_tgt, d_src


@dataclass
class PropagationOutput:
    h_user: np.ndarray       # (n_users+1, dim) semantic stage
    h_item: np.ndarray
    hat_user: np.ndarray     # (n_users+1, dim) final stage
    hat_item: np.ndarray


class MetapathPropagator:
    """Owns node embeddings and the six GAT layers of the two-stage scheme."""

    def __init__(self, graph, subgraphs: dict, dim: int = 32, heads: int = 1,
                 slope: float = 0.2, rng: Rng | None = None):
        if rng is None:
            raise ValueError("MetapathPropagator needs an explicit Rng")
        self.graph = graph
        self.subgraphs = subgraphs
        self.dim = dim
        init = rng.derive("gnn-init")
        bound = 1.0 / np.sqrt(dim)
        self.e_user = Parameter(
            init.derive("e_user").uniform(-bound, bound, (graph.n_users + 1, dim)),
            "gnn.e_user")
        self.e_item = Parameter(
            init.derive("e_item").uniform(-bound, bound, (graph.n_items + 1, dim)),
            "gnn.e_item")
        self.e_ufac = Parameter(
            init.derive("e_ufac").uniform(-bound, bound, (graph.n_user_factors, dim)),
            "gnn.e_ufac")
        self.e_ifac = Parameter(
            init.derive("e_ifac").uniform(-bound, bound, (graph.n_item_factors, dim)),
            "gnn.e_ifac")

        def layer(name):
            return GatLayer(dim, dim, init.derive(name), f"gnn.{name}",
                            heads=heads, slope=slope)

        self.user_sem_a = layer("user_sem_a")   # factors aggregate users
        self.user_sem_b = layer("user_sem_b")   # users aggregate factors + self
        self.item_sem_a = layer("item_sem_a")
        self.item_sem_b = layer("item_sem_b")
        self.user_inter = layer("user_inter")   # users aggregate items + self
        self.item_inter = layer("item_inter")
        self._nbr_cache = self._build_neighbor_lists()
        self._cache = None

    @property
    def params(self):
        out = [self.e_user, self.e_item, self.e_ufac, self.e_ifac]
        for lyr in (self.user_sem_a, self.user_sem_b, self.item_sem_a,
                    self.item_sem_b, self.user_inter, self.item_inter):
            out.extend(lyr.params)
        return out

    def _build_neighbor_lists(self):
        g = self.graph
        out = {}
        sub = self.subgraphs.get(Metapath.USER_SEMANTIC)
        if sub is not None:
            nuf = g.n_user_factors
            out["sem_u"] = [np.asarray(list(sub.fan_out[u]) + [nuf + u], dtype=np.int64)
                            for u in range(g.n_users + 1)]
            out["sem_u_in"] = sub.fan_in
        sub = self.subgraphs.get(Metapath.ITEM_SEMANTIC)
        if sub is not None:
            nif = g.n_item_factors
            out["sem_i"] = [np.asarray(list(sub.fan_out[i]) + [nif + i], dtype=np.int64)
                            for i in range(g.n_items + 1)]
            out["sem_i_in"] = sub.fan_in
        off = g.n_users + 1
        sub = self.subgraphs.get(Metapath.ITEM_TO_USER)
        if sub is not None:
            out["inter_u"] = [np.concatenate((sub.nbr[u] + off, [u]))
                              for u in range(g.n_users + 1)]
        sub = self.subgraphs.get(Metapath.USER_TO_ITEM)
        if sub is not None:
            out["inter_i"] = [np.concatenate((sub.nbr[i], [off + i]))
                              for i in range(g.n_items + 1)]
        return out

    def _require(self, key, kind):
        if key not in self._nbr_cache:
            raise ValueError(f"no subgraph extracted for active metapath {kind.value}")
        return self._nbr_cache[key]

    def forward(self, active) -> PropagationOutput:
        """Full-graph propagation; caches everything for backward."""
        active = set(active)
        g = self.graph
        cache = {"active": active}

        def semantic(side):
            kind = Metapath.USER_SEMANTIC if side == "u" else Metapath.ITEM_SEMANTIC
            table = self.e_user if side == "u" else self.e_item
            fac = self.e_ufac if side == "u" else self.e_ifac
            lyr_a = self.user_sem_a if side == "u" else self.item_sem_a
            lyr_b = self.user_sem_b if side == "u" else self.item_sem_b
            if kind not in active:
                cache[f"sem_{side}"] = None
                return table.value
            nbr_b = self._require(f"sem_{side}", kind)
            fan_in = self._nbr_cache[f"sem_{side}_in"]
            n_fac = fac.value.shape[0]
            HA, _, cache_a = lyr_a.forward(
                fac.value, table.value, np.arange(n_fac), fan_in)
            sources = np.concatenate((HA, table.value), axis=0)
            H, _, cache_b = lyr_b.forward(
                table.value, sources,
                np.arange(table.value.shape[0]), nbr_b)
            cache[f"sem_{side}"] = (cache_a, cache_b, n_fac)
            return H

        h_user = semantic("u")
        h_item = semantic("i")
        union = None

        def interaction(side):
            nonlocal union
            kind = Metapath.ITEM_TO_USER if side == "u" else Metapath.USER_TO_ITEM
            lyr = self.user_inter if side == "u" else self.item_inter
            own = h_user if side == "u" else h_item
            if kind not in active:
                cache[f"inter_{side}"] = None
                return own
            nbr = self._require(f"inter_{side}", kind)
            if union is None:
                union = np.concatenate((h_user, h_item), axis=0)
            H, _, c = lyr.forward(own, union, np.arange(own.shape[0]), nbr)
            cache[f"inter_{side}"] = c
            return H

        hat_user = interaction("u")
        hat_item = interaction("i")
        cache["h_user"], cache["h_item"] = h_user, h_item
        self._cache = cache
        return PropagationOutput(h_user=h_user, h_item=h_item,
                                 hat_user=hat_user, hat_item=hat_item)

    def backward(self, d_hat_user: np.ndarray, d_hat_item: np.ndarray) -> None:
        """Exact gradients through both stages into a) layer params, b) tables."""
        if self._cache is None:
            raise RuntimeError("backward without a cached forward")
        cache = self._cache
        g = self.graph
        n_u = g.n_users + 1
        d_h_user = np.zeros_like(cache["h_user"])
        d_h_item = np.zeros_like(cache["h_item"])

        c = cache["inter_u"]
        if c is None:
            d_h_user += d_hat_user
        else:
            d_tgt, d_src = self.user_inter.backward(c, d_hat_user)
            d_h_user += d_tgt
            d_h_user += d_src[:n_u]
            d_h_item += d_src[n_u:]
        c = cache["inter_i"]
        if c is None:
            d_h_item += d_hat_item
        else:
            d_tgt, d_src = self.item_inter.backward(c, d_hat_item)
            d_h_item += d_tgt
            d_h_user += d_src[:n_u]
            d_h_item += d_src[n_u:]

        def semantic_back(side, d_h):
            table = self.e_user if side == "u" else self.e_item
            fac = self.e_ufac if side == "u" else self.e_ifac
            lyr_a = self.user_sem_a if side == "u" else self.item_sem_a
            lyr_b = self.user_sem_b if side == "u" else self.item_sem_b
            c = cache[f"sem_{side}"]
            if c is None:
                table.grad += d_h
                return
            cache_a, cache_b, n_fac = c
            d_tgt_b, d_src_b = lyr_b.backward(cache_b, d_h)
            table.grad += d_tgt_b
            table.grad += d_src_b[n_fac:]
            d_ha = d_src_b[:n_fac]
            d_tgt_a, d_src_a = lyr_a.backward(cache_a, d_ha)
            if d_src_a is not None:
                fac.grad += d_tgt_a
                table.grad += d_src_a

        semantic_back("u", d_h_user)
        semantic_back("i", d_h_item)
