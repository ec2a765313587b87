"""Training configuration.

Every named constant of the pipeline lives here under a documented key and
can be overridden from a TOML file ([train] / [loss] / [density] / [model]
sections). Iteration-valued schedule fields are written at the reference
40k-iteration scale and shrink proportionally via `scaled()`.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

try:
    import tomllib  # py311+
except ModuleNotFoundError:  # pragma: no cover
    import tomli as tomllib

from dgns.density import DensityControlConfig
from dgns.losses import LossWeights


@dataclass
class ModelConfig:
    # splatting deformation net
    dgs_pos_freqs: int = 6
    dgs_time_freqs: int = 4
    dgs_depth: int = 8          # hidden layers
    dgs_width: int = 256
    # bijective map
    coupling_blocks: int = 4
    coupling_width: int = 64
    coupling_time_freqs: int = 4
    coupling_scale_bound: float = 1.0
    # sdf field
    sdf_hidden: int = 64
    sdf_feat_dim: int = 15
    sdf_trunk_layers: int = 4
    color_hidden: int = 64
    grid_levels: int = 8
    grid_table_log2: int = 15
    grid_base_res: int = 16
    grid_max_res: int = 256
    inv_s_init: float = 20.0
    sphere_init_radius_frac: float = 0.3  # x box diagonal
    sphere_init_iters: int = 500


@dataclass
class TrainConfig:
    # schedule, at the reference 40k scale
    total_iterations: int = 40000
    warmup_end: int = 10000             # depth guidance to the surface branch starts
    geometry_guidance_start: int = 15000  # geometry term in density control starts
    s_coarse_until: int = 20000         # sampling scale switches coarse -> fine
    deform_start: int = 3000            # splat deformation net activates
    lambda_gn_start: int = 10000        # splat normal loss activates
    checkpoint_interval: int = 1000

    s_coarse: float = 3.0
    s_fine: float = 1.0
    seed: int = 0
    rays_per_batch: int = 1024
    samples_per_ray: int = 32
    samples_per_ray_uniform: int = 64
    eikonal_points: int = 512
    image_downscale: int = 1
    n_init_gaussians: int = 5000
    init_opacity: float = 0.1
    sh_degree: int = 1
    background: tuple = (0.0, 0.0, 0.0)

    # depth products
    tau_d: float = 0.6
    tau_f_frac: float = 0.05        # agreement gate, x box diagonal
    depth_filter_combine: str = "midpoint"  # or "paper_literal"
    eps_floor_frac: float = 0.02    # guided-window floor, x box diagonal
    guidance_alpha_min: float = 0.5  # proposal trusted above this accumulation

    # branch / ablation switches
    enable_dns: bool = True
    enable_dgs_guidance: bool = True
    depth_supervision: str = "filtered"  # filtered | alpha | none
    use_normal_losses: bool = True
    use_deform: bool = True

    # learning rates
    lr_position: float = 1.6e-4
    lr_sh: float = 2.5e-3
    lr_opacity: float = 0.05
    lr_scale: float = 5e-3
    lr_quat: float = 1e-3
    lr_deform: float = 8e-4
    lr_sdf: float = 1e-3
    lr_coupling: float = 5e-4
    lr_inv_s: float = 1e-3

    loss: LossWeights = field(default_factory=LossWeights)
    density: DensityControlConfig = field(default_factory=DensityControlConfig)
    model: ModelConfig = field(default_factory=ModelConfig)

    _SCALED_FIELDS = ("total_iterations", "warmup_end",
                      "geometry_guidance_start", "s_coarse_until",
                      "deform_start", "lambda_gn_start")

    def scaled(self, scale: float) -> "TrainConfig":
        """Proportionally shrunk schedule (density start scales too)."""
        if scale <= 0:
            raise ValueError("scale must be positive")
        out = dataclasses.replace(self)
        for name in self._SCALED_FIELDS:
            setattr(out, name, max(1, int(round(getattr(self, name) * scale))))
        out.density = dataclasses.replace(
            self.density,
            start_iteration=max(1, int(round(self.density.start_iteration * scale))))
        out.validate()
        return out

    def validate(self):
        bounds = (self.deform_start, self.warmup_end,
                  self.geometry_guidance_start, self.s_coarse_until)
        if any(b > self.total_iterations for b in bounds):
            raise ValueError("phase boundaries must not exceed total_iterations")
        if not (self.warmup_end <= self.geometry_guidance_start):
            raise ValueError("depth guidance must start before geometry guidance")
        if self.depth_supervision not in ("filtered", "alpha", "none"):
            raise ValueError(f"bad depth_supervision {self.depth_supervision!r}")
        if self.image_downscale < 1:
            raise ValueError("image_downscale must be >= 1")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        data = dict(data)
        loss = LossWeights(**data.pop("loss", {}))
        density = DensityControlConfig(**data.pop("density", {}))
        model = ModelConfig(**data.pop("model", {}))
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        if "background" in data:
            data["background"] = tuple(data["background"])
        cfg = cls(loss=loss, density=density, model=model, **data)
        cfg.validate()
        return cfg

    @classmethod
    def from_toml(cls, path: str) -> "TrainConfig":
        """Sections: [train] (top-level keys), [loss], [density], [model]."""
        with open(path, "rb") as fh:
            raw = tomllib.load(fh)
        data = dict(raw.get("train", {}))
        for section in ("loss", "density", "model"):
            if section in raw:
                data[section] = raw[section]
        return cls.from_dict(data)
