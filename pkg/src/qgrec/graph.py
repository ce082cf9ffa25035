"""Heterogeneous graph over users, items, and quantized latent factors.

Nodes: users, items, user-side factor nodes, item-side factor nodes. A factor
node's identity is (level, codebook index) on its side: level-t codebooks are
shared across residual paths, so two entities touch the same node exactly
when they pick the same code at the same level. Edges:

  * u-i: user interacted with item, training split only (evaluation targets
    never create edges)
  * u-q: user linked to its assigned factor node per included level
  * i-q: item linked likewise

Four metapaths guide propagation: item->user, user->item (collaborative), and
user->factor->user, item->factor->item (semantic). Subgraph extraction
samples neighbors per target with a degree cap, one derived RNG stream per
(seed, target), so results are independent of iteration order.
"""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field

import numpy as np

from .numerics import Rng


class GraphConstructionError(ValueError):
    pass


class Metapath(enum.Enum):
    ITEM_TO_USER = "i->u"
    USER_SEMANTIC = "u->q->u"
    USER_TO_ITEM = "u->i"
    ITEM_SEMANTIC = "i->q->i"


ALL_METAPATHS = (Metapath.ITEM_TO_USER, Metapath.USER_SEMANTIC,
                 Metapath.USER_TO_ITEM, Metapath.ITEM_SEMANTIC)


@dataclass
class HeteroGraph:
    n_users: int
    n_items: int
    levels_used: tuple
    user_factors: list            # sorted [(level, index)], row = position
    item_factors: list
    u_items: list                 # user id -> sorted item ids (index 0 unused)
    i_users: list
    u_factor_rows: list           # user id -> factor rows (user_factors)
    uf_users: list                # factor row -> sorted user ids
    i_factor_rows: list
    if_items: list

    @property
    def n_user_factors(self):
        return len(self.user_factors)

    @property
    def n_item_factors(self):
        return len(self.item_factors)

    def edge_counts(self) -> dict:
        return {
            "ui": sum(len(x) for x in self.u_items),
            "uq": sum(len(x) for x in self.u_factor_rows),
            "iq": sum(len(x) for x in self.i_factor_rows),
        }

    def summary(self) -> dict:
        return {
            "nodes": {
                "users": self.n_users,
                "items": self.n_items,
                "user_factors": self.n_user_factors,
                "item_factors": self.n_item_factors,
            },
            "edges": self.edge_counts(),
            "levels_used": list(self.levels_used),
        }


def _factor_registry(assignments: dict, levels_used) -> list:
    nodes = set()
    for codes in assignments.values():
        for t in levels_used:
            nodes.add((int(t), int(codes[t])))
    return sorted(nodes)


def build_graph(ds, user_assignments: dict, item_assignments: dict,
                levels_used=(0, 1), dedupe: bool = True) -> HeteroGraph:
    """Assemble the typed adjacency from splits and factor assignments.

    Interaction edges come from the full per-user training sequences only.
    `levels_used` selects which quantization levels become factor nodes; it
    must stay within the assignment tuples' length.
    """
    levels_used = tuple(sorted(int(t) for t in levels_used))
    for u in ds.user_ids:
        if u not in user_assignments:
            raise GraphConstructionError(f"no factor assignment for user {u}")
    for i in range(1, ds.n_items + 1):
        if i not in item_assignments:
            raise GraphConstructionError(f"no factor assignment for item {i}")
    if levels_used:
        t_max = max(levels_used)
        some_user = next(iter(user_assignments.values()), ())
        some_item = next(iter(item_assignments.values()), ())
        if some_user and t_max >= len(some_user):
            raise GraphConstructionError(
                f"level {t_max} outside user assignment depth {len(some_user)}")
        if some_item and t_max >= len(some_item):
            raise GraphConstructionError(
                f"level {t_max} outside item assignment depth {len(some_item)}")

    user_factors = _factor_registry(
        {u: user_assignments[u] for u in ds.user_ids}, levels_used)
    item_factors = _factor_registry(item_assignments, levels_used)
    uf_row = {node: r for r, node in enumerate(user_factors)}
    if_row = {node: r for r, node in enumerate(item_factors)}

    u_items = [[] for _ in range(ds.n_users + 1)]
    i_users = [[] for _ in range(ds.n_items + 1)]
    pair_seen = set()
    for u in ds.user_ids:
        for item in ds.train[u]:
            if dedupe:
                if (u, item) in pair_seen:
                    continue
                pair_seen.add((u, item))
            u_items[u].append(item)
            i_users[item].append(u)
    for u in range(ds.n_users + 1):
        u_items[u] = sorted(u_items[u])
    for i in range(ds.n_items + 1):
        i_users[i] = sorted(i_users[i])

    u_factor_rows = [[] for _ in range(ds.n_users + 1)]
    uf_users = [[] for _ in range(len(user_factors))]
    for u in ds.user_ids:
        codes = user_assignments[u]
        rows = sorted({uf_row[(t, int(codes[t]))] for t in levels_used})
        u_factor_rows[u] = rows
        for r in rows:
            uf_users[r].append(u)
    i_factor_rows = [[] for _ in range(ds.n_items + 1)]
    if_items = [[] for _ in range(len(item_factors))]
    for i in range(1, ds.n_items + 1):
        codes = item_assignments[i]
        rows = sorted({if_row[(t, int(codes[t]))] for t in levels_used})
        i_factor_rows[i] = rows
        for r in rows:
            if_items[r].append(i)
    for lst in uf_users:
        lst.sort()
    for lst in if_items:
        lst.sort()

    return HeteroGraph(
        n_users=ds.n_users, n_items=ds.n_items, levels_used=levels_used,
        user_factors=user_factors, item_factors=item_factors,
        u_items=u_items, i_users=i_users,
        u_factor_rows=u_factor_rows, uf_users=uf_users,
        i_factor_rows=i_factor_rows, if_items=if_items)


@dataclass
class MetapathSubgraph:
    """Sampled neighbor lists for one metapath.

    Interaction paths fill `nbr` (per target entity id). Semantic paths fill
    `fan_out` (target -> its factor rows, never sampled) and `fan_in`
    (factor row -> sampled entity ids). Targets are not included in their
    own lists; propagation adds the self edge.
    """

    kind: Metapath
    seed: int
    degree_cap: int
    nbr: list | None = None
    fan_out: list | None = None
    fan_in: list | None = None


def _sample_list(items, cap, rng):
    if len(items) <= cap:
        return np.asarray(items, dtype=np.int64)
    pick = rng.choice(len(items), size=cap, replace=False)
    arr = np.asarray(items, dtype=np.int64)[pick]
    arr.sort()
    return arr


def extract_subgraph(g: HeteroGraph, kind: Metapath, degree_cap: int = 15,
                     rng: Rng | None = None) -> MetapathSubgraph:
    """Degree-capped neighbor sampling for one metapath."""
    if degree_cap < 1:
        raise ValueError("degree_cap must be >= 1")
    if rng is None:
        raise ValueError("extract_subgraph needs an explicit Rng")
    tag = kind.value
    if kind is Metapath.ITEM_TO_USER:
        nbr = [np.empty(0, dtype=np.int64)]
        nbr += [_sample_list(g.u_items[u], degree_cap, rng.derive(tag, u))
                for u in range(1, g.n_users + 1)]
        return MetapathSubgraph(kind=kind, seed=rng.seed, degree_cap=degree_cap,
                                nbr=nbr)
    if kind is Metapath.USER_TO_ITEM:
        nbr = [np.empty(0, dtype=np.int64)]
        nbr += [_sample_list(g.i_users[i], degree_cap, rng.derive(tag, i))
                for i in range(1, g.n_items + 1)]
        return MetapathSubgraph(kind=kind, seed=rng.seed, degree_cap=degree_cap,
                                nbr=nbr)
    if kind is Metapath.USER_SEMANTIC:
        fan_in = [_sample_list(g.uf_users[f], degree_cap, rng.derive(tag, "q", f))
                  for f in range(g.n_user_factors)]
        return MetapathSubgraph(kind=kind, seed=rng.seed, degree_cap=degree_cap,
                                fan_out=g.u_factor_rows, fan_in=fan_in)
    if kind is Metapath.ITEM_SEMANTIC:
        fan_in = [_sample_list(g.if_items[f], degree_cap, rng.derive(tag, "q", f))
                  for f in range(g.n_item_factors)]
        return MetapathSubgraph(kind=kind, seed=rng.seed, degree_cap=degree_cap,
                                fan_out=g.i_factor_rows, fan_in=fan_in)
    raise ValueError(f"unknown metapath {kind}")


def extract_all_subgraphs(g: HeteroGraph, degree_cap: int = 15,
                          rng: Rng | None = None,
                          per_path_caps: dict | None = None) -> dict:
    caps = per_path_caps or {}
    return {kind: extract_subgraph(g, kind, caps.get(kind.value, degree_cap), rng)
            for kind in ALL_METAPATHS}


def ablate(remove) -> tuple:
    """Remaining metapaths after removing a subset; empty means vanilla."""
    remove = set(remove)
    unknown = remove - set(ALL_METAPATHS)
    if unknown:
        raise ValueError(f"unknown metapaths: {unknown}")
    return tuple(k for k in ALL_METAPATHS if k not in remove)


def _render(kind: str, g: HeteroGraph, a: int, b: int):
    if kind == "ui":
        return f"u:{a}", f"i:{b}"
    if kind == "uq":
        t, k = g.user_factors[b]
        return f"u:{a}", f"qu:{t}:{k}"
    t, k = g.item_factors[b]
    return f"i:{a}", f"qi:{t}:{k}"


def export_edges(g: HeteroGraph, path) -> None:
    """TSV edge list `kind\\tsrc\\tdst` in a stable order."""
    levels = ",".join(str(t) for t in g.levels_used)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"# qgrec-edges v1 users={g.n_users} items={g.n_items} "
                 f"levels={levels}\n")
        for u in range(1, g.n_users + 1):
            for i in g.u_items[u]:
                s, d = _render("ui", g, u, i)
                fh.write(f"ui\t{s}\t{d}\n")
        for u in range(1, g.n_users + 1):
            for r in g.u_factor_rows[u]:
                s, d = _render("uq", g, u, r)
                fh.write(f"uq\t{s}\t{d}\n")
        for i in range(1, g.n_items + 1):
            for r in g.i_factor_rows[i]:
                s, d = _render("iq", g, i, r)
                fh.write(f"iq\t{s}\t{d}\n")


def import_edges(path) -> HeteroGraph:
    """Rebuild a HeteroGraph from an edge export (round-trip isomorphic)."""
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().strip()
        if not header.startswith("# qgrec-edges v1"):
            raise ValueError(f"{path}: not an edge export")
        meta = dict(tok.split("=", 1) for tok in header.split()[3:])
        n_users = int(meta["users"])
        n_items = int(meta["items"])
        levels = tuple(int(t) for t in meta["levels"].split(",")) \
            if meta.get("levels") else ()
        ui, uq, iq = [], [], []
        for line in fh:
            parts = line.strip().split("\t")
            if len(parts) != 3:
                continue
            kind, src, dst = parts
            if kind == "ui":
                ui.append((int(src.split(":")[1]), int(dst.split(":")[1])))
            elif kind == "uq":
                _, t, k = dst.split(":")
                uq.append((int(src.split(":")[1]), (int(t), int(k))))
            elif kind == "iq":
                _, t, k = dst.split(":")
                iq.append((int(src.split(":")[1]), (int(t), int(k))))

    user_factors = sorted({node for _, node in uq})
    item_factors = sorted({node for _, node in iq})
    uf_row = {node: r for r, node in enumerate(user_factors)}
    if_row = {node: r for r, node in enumerate(item_factors)}
    g = HeteroGraph(
        n_users=n_users, n_items=n_items, levels_used=levels,
        user_factors=user_factors, item_factors=item_factors,
        u_items=[[] for _ in range(n_users + 1)],
        i_users=[[] for _ in range(n_items + 1)],
        u_factor_rows=[[] for _ in range(n_users + 1)],
        uf_users=[[] for _ in range(len(user_factors))],
        i_factor_rows=[[] for _ in range(n_items + 1)],
        if_items=[[] for _ in range(len(item_factors))])
    for u, i in ui:
        g.u_items[u].append(i)
        g.i_users[i].append(u)
    for u, node in uq:
        g.u_factor_rows[u].append(uf_row[node])
        g.uf_users[uf_row[node]].append(u)
    for i, node in iq:
        g.i_factor_rows[i].append(if_row[node])
        g.if_items[if_row[node]].append(i)
    for lists in (g.u_items, g.i_users, g.u_factor_rows, g.uf_users,
                  g.i_factor_rows, g.if_items):
        for lst in lists:
            lst.sort()
    return g


def write_summary(g: HeteroGraph, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(g.summary(), fh, indent=2, sort_keys=True)
        fh.write("\n")
