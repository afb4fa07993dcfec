from typing import Dict, Type

from core.errors import OffManifoldError
from core.targets.sphere import Sphere2, SphereProduct
from core.targets.target import TargetManifold
from core.targets.torus import FlatTorus2

TARGETS: Dict[str, Type[TargetManifold]] = {
    'sphere2': Sphere2,
    'flat_torus2': FlatTorus2,
    'sphere_product': SphereProduct,
}


def make_target(name: str, **kwargs) -> TargetManifold:
    """Instantiates a target by its config name."""
    if name not in TARGETS:
        raise OffManifoldError(f"unknown target '{name}', expected one of {sorted(TARGETS)}")
    return TARGETS[name](**kwargs)
