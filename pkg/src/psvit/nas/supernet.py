"""Single-path supernet: per cell a basic layer, a map-sharing pair, or identity."""

from __future__ import annotations

from dataclasses import replace

import numpy as np

from ..arch import CHOICES, CellChoice, Genotype, PatchConfig, StageSpec, require_valid
from ..layers import EncoderLayer, EncoderLayerConfig, Module, StageBackbone, ViT, run_stage
from ..tensor import ContractError


class Cell(Module):
    """Parameters for every path through one cell; the paths share nothing."""

    def __init__(self, dim, heads, mlp_ratio, rng):
        self.basic = EncoderLayer(EncoderLayerConfig(dim, heads, mlp_ratio, False), rng)
        self.pair = [
            EncoderLayer(EncoderLayerConfig(dim, heads, mlp_ratio, False), rng),
            EncoderLayer(EncoderLayerConfig(dim, heads, mlp_ratio, True), rng),
        ]

    def layers(self, choice):
        choice = CellChoice(choice)
        if choice is CellChoice.BASIC:
            return [self.basic]
        if choice is CellChoice.SHARED_PAIR:
            return list(self.pair)
        return []

    def prefix(self, choice):
        """Parameter-name prefixes of the layers a choice activates."""
        return {"B": ["basic."], "S": ["pair.0.", "pair.1."], "I": []}[CellChoice(choice).value]


def parse_path(path, n_cells=None):
    """Accept a string like ``"BSI..."`` or any iterable of choices."""
    if isinstance(path, str):
        path = list(path.strip().upper())
    out = tuple(CellChoice(c) for c in path)
    if n_cells is not None and len(out) != n_cells:
        raise ContractError(f"path has {len(out)} cells, supernet has {n_cells}")
    return out


def path_str(path):
    return "".join(CellChoice(c).value for c in path)


class Supernet(StageBackbone):
    """Supernet over a stage schedule.

    ``template`` fixes pooling mode, patch config and per-stage tokens/dim/heads;
    its per-stage cell count sets the number of cells (choices are ignored).
    """

    def __init__(self, template: Genotype, rng):
        require_valid(template)
        super().__init__(template, rng)
        self.cells = [[Cell(s.dim, s.heads, template.mlp_ratio, rng) for _ in s.cells] for s in template.stages]

    @property
    def num_cells(self):
        return sum(len(c) for c in self.cells)

    def cells_per_stage(self):
        return [len(c) for c in self.cells]

    def split_path(self, path):
        path = parse_path(path, self.num_cells)
        out, i = [], 0
        for n in self.cells_per_stage():
            out.append(path[i : i + n])
            i += n
        return out

    def genotype_for(self, path) -> Genotype:
        return self.genotype.with_cells(parse_path(path, self.num_cells))

    def __call__(self, images, path, maps_out=None):
        x = self.embed(images)
        for si, (cells, choices) in enumerate(zip(self.cells, self.split_path(path))):
            if si > 0:
                x = self.pools[si - 1](x)
            stage_maps = [] if maps_out is not None else None
            for cell, choice in zip(cells, choices):
                # sharing never crosses a cell boundary: each cell starts fresh
                x = run_stage(x, cell.layers(choice), CellChoice(choice).layer_flags, stage_maps)
            if maps_out is not None:
                maps_out.append(stage_maps)
        return self.head(x, self.genotype.patch.cls_token)

    def backbone_names(self):
        return [n for n, _ in self.named_parameters() if not n.startswith("cells.")]

    def path_parameter_names(self, path):
        """Names of every parameter a forward pass along ``path`` reads."""
        names = set(self.backbone_names())
        params = dict(self.named_parameters())
        for si, (cells, choices) in enumerate(zip(self.cells, self.split_path(path))):
            for ci, (cell, choice) in enumerate(zip(cells, choices)):
                for pre in cell.prefix(choice):
                    stem = f"cells.{si}.{ci}.{pre}"
                    names.update(n for n in params if n.startswith(stem))
        return names

    def extract(self, path, rng=None) -> ViT:
        """Standalone model for ``path`` whose weights are copied out of the supernet."""
        g = self.genotype_for(path)
        model = ViT(g, rng if rng is not None else np.random.default_rng(0))
        src = dict(self.named_parameters())
        state = {}
        for name in model.state_dict():
            if not name.startswith("stages."):
                state[name] = src[name].data.copy()
        for si, (cells, choices) in enumerate(zip(self.cells, self.split_path(path))):
            li = 0
            for ci, (cell, choice) in enumerate(zip(cells, choices)):
                for pre in cell.prefix(choice):
                    stem = f"cells.{si}.{ci}.{pre}"
                    for n, p in src.items():
                        if n.startswith(stem):
                            state[f"stages.{si}.{li}.{n[len(stem):]}"] = p.data.copy()
                    li += 1
        model.load_state_dict(state)
        return model


def build_supernet(tokens, dims, heads, patch: PatchConfig, pooling_mode="1D", cells_per_stage=6, num_classes=1000,
                   mlp_ratio=4, rng=None) -> Supernet:
    """Supernet over an explicit stage schedule (``cells_per_stage`` int or per-stage list)."""
    if isinstance(cells_per_stage, int):
        cells_per_stage = [cells_per_stage] * len(tokens)
    stages = tuple(
        StageSpec(t, d, h, (CellChoice.BASIC,) * n) for t, d, h, n in zip(tokens, dims, heads, cells_per_stage)
    )
    template = Genotype(pooling_mode, patch, stages, num_classes, mlp_ratio)
    return Supernet(template, rng if rng is not None else np.random.default_rng(0))


def supernet_template(g: Genotype, cells_per_stage) -> Genotype:
    """Reuse a genotype's schedule with a new per-stage cell count."""
    if isinstance(cells_per_stage, int):
        cells_per_stage = [cells_per_stage] * len(g.stages)
    if len(cells_per_stage) != len(g.stages):
        raise ValueError(f"{len(cells_per_stage)} cell counts for {len(g.stages)} stages")
    stages = tuple(replace(s, cells=(CellChoice.BASIC,) * n, share_flags=None) for s, n in zip(g.stages, cells_per_stage))
    return replace(g, stages=stages)


def sample_path(rng, n_cells):
    """Each cell independently uniform over the three choices."""
    return tuple(CHOICES[i] for i in rng.integers(0, len(CHOICES), size=n_cells))
