"""Planted-signal recipe graphs for desk-scale experiments.

Every cuisine class owns a centroid per recipe modality and a pool of
ingredients. Recipe attributes are ``signal * centroid + noise * N(0, 1)``.
Edges prefer same-class endpoints with the per-relation ``*_bias``
probability and are otherwise uniform.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .hetgraph import AttributeTable, HetGraph, LabelSet, Modality, NodeType, RelationType

__all__ = ["SyntheticConfig", "generate_synthetic", "structure_signal_config"]


@dataclass
class SyntheticConfig:
    n_users: int = 40
    n_recipes: int = 300
    n_ingredients: int = 60
    n_classes: int = 3
    n_regions: int = 2
    image_dim: int = 512
    text_dim: int = 512
    nutrient_dim: int = 46
    user_dim: int = 64
    # attribute signal: 0 gives pure noise attributes
    signal: float = 1.0
    noise: float = 1.0
    ingredients_per_recipe: int = 5
    users_per_recipe: int = 2
    similar_per_recipe: int = 2
    cooccur_per_ingredient: int = 2
    ri_bias: float = 0.8
    ur_bias: float = 0.8
    rr_bias: float = 0.8

    def validate(self) -> None:
        for name in ("n_users", "n_recipes", "n_ingredients", "n_classes", "n_regions"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")
        for name in ("image_dim", "text_dim", "nutrient_dim", "user_dim"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        for name in ("signal", "ri_bias", "ur_bias", "rr_bias"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {getattr(self, name)}")
        if self.noise < 0:
            raise ValueError("noise must be non-negative")
        for name in ("ingredients_per_recipe", "users_per_recipe", "similar_per_recipe", "cooccur_per_ingredient"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")

    def to_dict(self) -> dict:
        return asdict(self)


def structure_signal_config(**overrides) -> SyntheticConfig:
    """Noise-only attributes; the class is readable only from R-I edges.

    Recipe image/text noise is kept 2-dimensional so per-node noise cannot be
    memorized faster than the ingredient structure is learned.
    """
    base = dict(signal=0.0, ri_bias=0.9, ur_bias=0.0, rr_bias=0.0, image_dim=2, text_dim=2)
    base.update(overrides)
    return SyntheticConfig(**base)


def _ids(prefix: str, n: int) -> list[str]:
    width = max(4, len(str(n - 1)))
    return [f"{prefix}{i:0{width}d}" for i in range(n)]


def _pick(rng: np.random.Generator, k: int, pool: np.ndarray, everyone: np.ndarray, bias: float, exclude=None):
    """Up to ``k`` distinct draws; each from ``pool`` w.p. ``bias`` else uniform."""
    chosen: list[int] = []
    tries = 0
    while len(chosen) < k and tries < 20 * k + 20:
        tries += 1
        src = pool if (pool.size and rng.random() < bias) else everyone
        c = int(src[rng.integers(src.size)])
        if c != exclude and c not in chosen:
            chosen.append(c)
    return chosen


def generate_synthetic(config: SyntheticConfig | None = None, seed: int = 0) -> tuple[HetGraph, LabelSet]:
    """Build a planted-signal graph; identical ``seed`` gives an identical graph."""
    cfg = config or SyntheticConfig()
    cfg.validate()
    rng = np.random.default_rng(seed)
    C = cfg.n_classes

    users, recipes, ingredients = _ids("u", cfg.n_users), _ids("r", cfg.n_recipes), _ids("i", cfg.n_ingredients)
    recipe_class = np.arange(cfg.n_recipes) % C
    rng.shuffle(recipe_class)
    user_class = np.arange(cfg.n_users) % C
    ingredient_class = np.arange(cfg.n_ingredients) % C

    centroids = {
        Modality.IMAGE: rng.standard_normal((C, cfg.image_dim)),
        Modality.TEXT: rng.standard_normal((C, cfg.text_dim)),
        Modality.NUTRIENT: rng.standard_normal((C, cfg.nutrient_dim)),
    }
    image = cfg.signal * centroids[Modality.IMAGE][recipe_class] + cfg.noise * rng.standard_normal(
        (cfg.n_recipes, cfg.image_dim)
    )
    text = cfg.signal * centroids[Modality.TEXT][recipe_class] + cfg.noise * rng.standard_normal(
        (cfg.n_recipes, cfg.text_dim)
    )
    nutrient = cfg.signal * centroids[Modality.NUTRIENT][ingredient_class] + cfg.noise * rng.standard_normal(
        (cfg.n_ingredients, cfg.nutrient_dim)
    )
    user_vecs = rng.standard_normal((cfg.n_users, cfg.user_dim))

    all_users, all_recipes, all_ings = np.arange(cfg.n_users), np.arange(cfg.n_recipes), np.arange(cfg.n_ingredients)
    users_of = [all_users[user_class == c] for c in range(C)]
    recipes_of = [all_recipes[recipe_class == c] for c in range(C)]
    ings_of = [all_ings[ingredient_class == c] for c in range(C)]

    edges: list[tuple[RelationType, str, str]] = []
    for r in range(cfg.n_recipes):
        c = recipe_class[r]
        for i in _pick(rng, cfg.ingredients_per_recipe, ings_of[c], all_ings, cfg.ri_bias):
            edges.append((RelationType.RECIPE_INGREDIENT, recipes[r], ingredients[i]))
        for u in _pick(rng, cfg.users_per_recipe, users_of[c], all_users, cfg.ur_bias):
            edges.append((RelationType.USER_RECIPE, users[u], recipes[r]))
        if cfg.n_recipes > 1:
            for s in _pick(rng, cfg.similar_per_recipe, recipes_of[c], all_recipes, cfg.rr_bias, exclude=r):
                edges.append((RelationType.RECIPE_RECIPE, recipes[r], recipes[s]))
    if cfg.n_ingredients > 1:
        for i in range(cfg.n_ingredients):
            for j in _pick(rng, cfg.cooccur_per_ingredient, all_ings, all_ings, 0.0, exclude=i):
                edges.append((RelationType.INGREDIENT_INGREDIENT, ingredients[i], ingredients[j]))

    node_types = {v: NodeType.USER for v in users}
    node_types.update({v: NodeType.RECIPE for v in recipes})
    node_types.update({v: NodeType.INGREDIENT for v in ingredients})
    cwidth, rwidth = len(str(C - 1)), len(str(cfg.n_regions - 1))
    cuisine = {recipes[r]: f"cuisine{int(recipe_class[r]):0{cwidth}d}" for r in range(cfg.n_recipes)}
    region = {recipes[r]: f"region{int(recipe_class[r]) % cfg.n_regions:0{rwidth}d}" for r in range(cfg.n_recipes)}
    attrs = {
        Modality.IMAGE: AttributeTable(recipes, image),
        Modality.TEXT: AttributeTable(recipes, text),
        Modality.NUTRIENT: AttributeTable(ingredients, nutrient),
        Modality.USER: AttributeTable(users, user_vecs),
    }
    g = HetGraph(node_types, edges, attrs, {"cuisine": cuisine, "region": region})
    return g, g.labels("cuisine")
