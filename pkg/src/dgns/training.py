"""Joint training of the splatting and surface branches.

Per iteration: one frame is drawn; the splatting branch renders the full
(optionally downscaled) frame and its depth products; the surface branch
renders a ray batch sampled inside depth-guided windows once guidance is
active (uniform over the scene box before that); both losses add on one
tape and every module steps its own Adam group. Density control runs on
its own interval, with the SDF-proximity terms once the geometry-guidance
phase starts. Fixed seed means bit-identical loss logs.
"""

from __future__ import annotations

import csv
import json
import os
import time as _time

import numpy as np

from dgns import autodiff as ad
from dgns.autodiff import Adam, Param, Tape, tape_backward
from dgns.checkpoint import load_arrays, save_arrays
from dgns.config import TrainConfig
from dgns.datasets import Dataset, FrameRecord
from dgns.deform import BijectiveDeformation, DgsDeformNet
from dgns.density import (apply_density_control, growth_score, prune_score,
                          remap_adam_moments)
from dgns.gaussians import Camera, GaussianScene
from dgns.imgio import save_png
from dgns.losses import image_loss_dg, surface_losses_dn, total_loss
from dgns.meshing import (extract_mesh, load_obj, sample_surface_points,
                          save_mesh_sequence)
from dgns.metrics import (MetricReport, chamfer_distance,
                          earth_mover_distance, psnr, ssim_value)
from dgns.rasterizer import RenderConfig, render
from dgns.surface import (SdfField, guided_sample_ray, render_rays, sdf_eval,
                          uniform_sample_ray)


class TrainingAborted(RuntimeError):
    pass


class Models:
    """The four trainable components plus construction/serialization."""

    def __init__(self, gaussians: GaussianScene, dgs_deform: DgsDeformNet,
                 sdf_field: SdfField | None,
                 coupling: BijectiveDeformation | None):
        self.gaussians = gaussians
        self.dgs_deform = dgs_deform
        self.sdf_field = sdf_field
        self.coupling = coupling

    def named_params(self) -> dict[str, Param]:
        params = list(self.gaussians.params) + list(self.dgs_deform.params)
        if self.sdf_field is not None:
            params += self.sdf_field.params
        if self.coupling is not None:
            params += self.coupling.params
        out = {}
        for p in params:
            if p.name in out:
                raise ValueError(f"duplicate param name {p.name}")
            out[p.name] = p
        return out


def build_models(cfg: TrainConfig, box_min, box_max,
                 rng: np.random.Generator, n_gaussians: int | None = None,
                 sphere_init: bool = True) -> Models:
    m = cfg.model
    n = cfg.n_init_gaussians if n_gaussians is None else n_gaussians
    gaussians = GaussianScene.random_init(
        n, box_min, box_max, rng, opacity=cfg.init_opacity,
        sh_degree=cfg.sh_degree)
    dgs_deform = DgsDeformNet(pos_freqs=m.dgs_pos_freqs,
                              time_freqs=m.dgs_time_freqs, depth=m.dgs_depth,
                              width=m.dgs_width, rng=rng)
    sdf_field = coupling = None
    if cfg.enable_dns:
        sdf_field = SdfField(box_min, box_max, hidden=m.sdf_hidden,
                             feat_dim=m.sdf_feat_dim,
                             trunk_layers=m.sdf_trunk_layers,
                             color_hidden=m.color_hidden,
                             grid_levels=m.grid_levels,
                             grid_table_size=2 ** m.grid_table_log2,
                             grid_base_res=m.grid_base_res,
                             grid_max_res=m.grid_max_res,
                             inv_s_init=m.inv_s_init, rng=rng)
        coupling = BijectiveDeformation(
            n_blocks=m.coupling_blocks, width=m.coupling_width,
            time_freqs=m.coupling_time_freqs,
            scale_bound=m.coupling_scale_bound, rng=rng)
        if sphere_init:
            diag = float(np.linalg.norm(np.asarray(box_max) - box_min))
            sdf_field.initialize_sphere(m.sphere_init_radius_frac * diag,
                                        iters=m.sphere_init_iters, rng=rng)
    return Models(gaussians, dgs_deform, sdf_field, coupling)


def save_checkpoint(path: str, models: Models, cfg: TrainConfig,
                    iteration: int, box_min, box_max):
    arrays = {name: p.value for name, p in models.named_params().items()}
    meta = {"iteration": iteration, "config": cfg.to_dict(),
            "box_min": list(np.asarray(box_min, dtype=float)),
            "box_max": list(np.asarray(box_max, dtype=float)),
            "n_gaussians": len(models.gaussians)}
    save_arrays(path, arrays, meta)


def load_checkpoint(path: str):
    """Returns (models, cfg, meta)."""
    arrays, meta = load_arrays(path)
    cfg = TrainConfig.from_dict(meta["config"])
    models = build_models(cfg, meta["box_min"], meta["box_max"],
                          np.random.default_rng(0),
                          n_gaussians=meta["n_gaussians"], sphere_init=False)
    named = models.named_params()
    missing = set(named) - set(arrays)
    if missing:
        raise ValueError(f"checkpoint {path} missing arrays: {sorted(missing)}")
    for name, p in named.items():
        if arrays[name].shape != p.value.shape:
            raise ValueError(f"checkpoint array {name} has shape "
                             f"{arrays[name].shape}, expected {p.value.shape}")
        p.value = np.ascontiguousarray(arrays[name])
    return models, cfg, meta


def downscale_image(img: np.ndarray, factor: int) -> np.ndarray:
    if factor == 1:
        return img
    h = img.shape[0] // factor * factor
    w = img.shape[1] // factor * factor
    img = img[:h, :w]
    return img.reshape(h // factor, factor, w // factor, factor,
                       *img.shape[2:]).mean(axis=(1, 3))


def _pixel_rays(cam: Camera, ii: np.ndarray, jj: np.ndarray):
    """World rays through pixel centers. Returns (origins, unit dirs,
    z-to-ray-length factors)."""
    dirs_cam = np.stack([(ii + 0.5 - cam.cx) / cam.fx,
                         (jj + 0.5 - cam.cy) / cam.fy,
                         np.ones(ii.size)], axis=-1)
    ray_scale = np.linalg.norm(dirs_cam, axis=-1)  # length per unit z-depth
    dirs = dirs_cam @ cam.rotation
    dirs /= np.linalg.norm(dirs, axis=-1, keepdims=True)
    origins = np.tile(cam.center, (ii.size, 1))
    return origins, dirs, ray_scale


class Trainer:
    def __init__(self, dataset: Dataset, cfg: TrainConfig, out_dir: str):
        cfg.validate()
        self.dataset = dataset
        self.cfg = cfg
        self.out_dir = out_dir
        os.makedirs(out_dir, exist_ok=True)
        self.rng = np.random.default_rng(cfg.seed)
        self.box_min, self.box_max = dataset.box_min, dataset.box_max
        self.diag = dataset.diagonal
        self.models = build_models(cfg, self.box_min, self.box_max, self.rng)

        self.render_cfg = RenderConfig(
            background=cfg.background, tau_d=cfg.tau_d,
            tau_f=cfg.tau_f_frac * self.diag,
            depth_filter_combine=cfg.depth_filter_combine,
            sh_degree=cfg.sh_degree)

        g = self.models.gaussians
        self.gauss_opt = Adam([
            ([g.positions], cfg.lr_position * self.diag),
            ([g.sh], cfg.lr_sh),
            ([g.opacity_logits], cfg.lr_opacity),
            ([g.log_scales], cfg.lr_scale),
            ([g.quats], cfg.lr_quat),
        ])
        self.deform_opt = Adam([(self.models.dgs_deform.params, cfg.lr_deform)])
        self.dns_opt = None
        if cfg.enable_dns:
            f = self.models.sdf_field
            self.dns_opt = Adam([
                (f.grid.params + f.trunk.params + f.color_net.params, cfg.lr_sdf),
                ([f.log_inv_s], cfg.lr_inv_s),
                (self.models.coupling.params, cfg.lr_coupling),
            ])

        self.frames_small = [
            (fr, downscale_image(fr.image, cfg.image_downscale),
             None if fr.normal is None
             else downscale_image(fr.normal, cfg.image_downscale),
             None if fr.normal_valid is None
             else downscale_image(fr.normal_valid.astype(np.float64),
                                  cfg.image_downscale) > 0.5)
            for fr in dataset.frames]

        self.loss_log_path = os.path.join(out_dir, "loss_log.csv")
        self.density_log_path = os.path.join(out_dir, "density_log.jsonl")
        self.ckpt_path = os.path.join(out_dir, "checkpoint.bin")
        self._log_rows = []
        self._last_good = None

    # -- helpers ----------------------------------------------------------

    def _deform_fn(self, iteration: int):
        if not self.cfg.use_deform or iteration < self.cfg.deform_start:
            return None
        return self.models.dgs_deform

    def _sampling_scale(self, iteration: int) -> float:
        return self.cfg.s_coarse if iteration < self.cfg.s_coarse_until \
            else self.cfg.s_fine

    def _guidance_active(self, iteration: int) -> bool:
        return (self.cfg.enable_dgs_guidance
                and iteration >= self.cfg.warmup_end)

    # -- one iteration ------------------------------------------------------

    def step(self, iteration: int) -> dict:
        cfg = self.cfg
        t0 = _time.perf_counter()
        fidx = int(self.rng.integers(len(self.dataset)))
        frame, target, target_n, target_nv = self.frames_small[fidx]
        cam = frame.camera.downscaled(cfg.image_downscale)
        t = frame.time

        row = {"iteration": iteration, "frame": fidx, "n_gauss":
               len(self.models.gaussians), "n_filtered_px": 0}
        with Tape():
            out = render(self.models.gaussians, cam, self.render_cfg,
                         deform_fn=self._deform_fn(iteration), t=t)
            l_dg, parts = image_loss_dg(
                out, target, cfg.loss, target_normals=target_n,
                normal_valid=target_nv,
                lambda_gn_active=(cfg.use_normal_losses
                                  and iteration >= cfg.lambda_gn_start))
            row.update(parts)

            if cfg.enable_dns:
                l_dn, dn_parts, nfil = self._dns_loss(iteration, frame, cam,
                                                      target, target_n,
                                                      target_nv, out, t)
                row.update(dn_parts)
                row["n_filtered_px"] = nfil
                loss = total_loss(l_dg, l_dn)
            else:
                loss = l_dg

            loss_v = float(ad.value(loss).item())
            row["total"] = loss_v
            if not np.isfinite(loss_v):
                self._abort(iteration, row)
            grads = tape_backward(loss)

            g = self.models.gaussians
            mean2d_grad = grads.by_node(out.stats["mean2d_node"])
            if mean2d_grad is None:
                mean2d_grad = np.zeros((len(g), 2))
            g.accumulate_stats(mean2d_grad, grads.get(g.positions))

            self.gauss_opt.step(grads)
            if self._deform_fn(iteration) is not None:
                self.deform_opt.step(grads)
            if self.dns_opt is not None:
                self.dns_opt.step(grads)
        g.renormalize_quats()

        self._density_control(iteration, t)
        row["seconds"] = _time.perf_counter() - t0
        self._log_rows.append(row)
        return row

    def _dns_loss(self, iteration, frame: FrameRecord, cam: Camera,
                  target, target_n, target_nv, render_out, t):
        cfg = self.cfg
        h, w = target.shape[:2]
        n_rays = min(cfg.rays_per_batch, h * w)
        pick = self.rng.choice(h * w, size=n_rays, replace=False)
        jj, ii = pick // w, pick % w
        origins, dirs, ray_scale = _pixel_rays(cam, ii, jj)

        bundle = render_out.depth
        alpha_img = ad.value(render_out.alpha)
        if self._guidance_active(iteration):
            d_alpha_z = bundle.d_alpha[jj, ii]
            trusted = alpha_img[jj, ii] > cfg.guidance_alpha_min
            batch = guided_sample_ray(
                origins, dirs, d_alpha_z * ray_scale, trusted,
                self._sampling_scale(iteration), cfg.samples_per_ray, t,
                self.models.sdf_field, self.models.coupling, self.rng,
                eps_floor=cfg.eps_floor_frac * self.diag)
        else:
            batch = uniform_sample_ray(origins, dirs,
                                       cfg.samples_per_ray_uniform,
                                       self.models.sdf_field, self.rng)

        want_normals = (cfg.use_normal_losses and target_n is not None
                        and cfg.loss.lambda_nn > 0)
        ray_out = render_rays(self.models.sdf_field, self.models.coupling,
                              batch, t, background=cfg.background,
                              want_normals=want_normals)
        if want_normals:
            # supervision normals live in camera space
            ray_out["normal"] = ad.matmul(
                ray_out["normal"], ad.DiffArray(cam.rotation.T))

        # depth supervision points (pseudo-GT from the splatting branch)
        filtered_pts = None
        n_filtered = 0
        if iteration >= cfg.warmup_end and cfg.depth_supervision != "none":
            if cfg.depth_supervision == "filtered":
                depth_z = bundle.d_filtered[jj, ii]
                ok = bundle.valid[jj, ii]
            else:  # alpha
                depth_z = bundle.d_alpha[jj, ii]
                ok = (bundle.d_alpha[jj, ii] > 0) \
                    & (alpha_img[jj, ii] > cfg.guidance_alpha_min)
            n_filtered = int(ok.sum())
            if n_filtered:
                filtered_pts = (origins[ok] + (depth_z[ok] * ray_scale[ok])[:, None]
                                * dirs[ok])

        eik_pts = self._eikonal_points(ray_out, t)
        tn_rays = None if target_n is None else target_n[jj, ii]
        nv_rays = None if target_nv is None else target_nv[jj, ii]
        l_dn, parts = surface_losses_dn(
            ray_out, target[jj, ii], self.models.sdf_field,
            self.models.coupling, t, cfg.loss, filtered_points=filtered_pts,
            eikonal_points=eik_pts, target_normals=tn_rays,
            normal_valid=nv_rays)
        return l_dn, parts, n_filtered

    def _eikonal_points(self, ray_out, t):
        """Half perturbed near-surface canonical points, half uniform."""
        n = self.cfg.eikonal_points
        if n <= 0:
            return None
        half = n // 2
        uni = self.rng.uniform(self.box_min, self.box_max, size=(n - half, 3))
        sdf_v = np.abs(ad.value(ray_out["sdf"])).ravel()
        pts_o = ray_out["points"].reshape(-1, 3)
        near_mask = sdf_v < 0.1 * self.diag
        idx = np.nonzero(near_mask)[0]
        if idx.size == 0:
            return np.concatenate(
                [uni, self.rng.uniform(self.box_min, self.box_max,
                                       size=(half, 3))])
        take = self.rng.choice(idx, size=half, replace=idx.size < half)
        near_o = pts_o[take]
        if self.models.coupling is not None:
            near_c = ad.value(self.models.coupling.forward(near_o, t))
        else:
            near_c = near_o
        near_c = near_c + self.rng.normal(0.0, 0.01 * self.diag,
                                          size=near_c.shape)
        return np.concatenate([near_c, uni])

    def _density_control(self, iteration: int, t: float):
        cfg = self.cfg
        dc = cfg.density
        until = int(cfg.total_iterations * dc.until_frac)
        if not (dc.start_iteration <= iteration <= until
                and iteration % dc.interval == 0):
            return
        g = self.models.gaussians
        d_g = None
        if (cfg.enable_dns and iteration >= cfg.geometry_guidance_start):
            pos = g.positions.value
            if self._deform_fn(iteration) is not None:
                dx = ad.value(self.models.dgs_deform(pos, t)[0])
                pos = pos + dx
            d_g = ad.value(sdf_eval(self.models.sdf_field,
                                    self.models.coupling, pos, t))
        eps_g = growth_score(g.mean_grad2d(), d_g, dc)
        eps_p = prune_score(g.opacity_accum, d_g, dc)
        result = apply_density_control(g, eps_g, eps_p, dc, self.rng)
        states = [st for _, st in self.gauss_opt.groups]
        remap_adam_moments(result, states, g.params)
        with open(self.density_log_path, "a") as fh:
            fh.write(json.dumps(result.log_record(iteration, len(g))) + "\n")

    # -- driver -------------------------------------------------------------

    def _abort(self, iteration: int, row: dict):
        diag_path = os.path.join(self.out_dir, "abort_diagnostics.json")
        with open(diag_path, "w") as fh:
            json.dump({"iteration": iteration, "row": row,
                       "last_good_checkpoint": self._last_good}, fh, indent=2)
        self._flush_log()
        raise TrainingAborted(
            f"non-finite loss at iteration {iteration}; diagnostics at "
            f"{diag_path}, last good checkpoint: {self._last_good}")

    def _flush_log(self):
        if not self._log_rows:
            return
        keys = ["iteration", "frame", "total", "dg_l1", "dg_ssim", "dg_normal",
                "dn_l1", "dn_sdf", "dn_normal", "dn_eik", "n_gauss",
                "n_filtered_px", "seconds"]
        new_file = not os.path.exists(self.loss_log_path)
        with open(self.loss_log_path, "a", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=keys, extrasaction="ignore",
                                    restval=0.0)
            if new_file:
                writer.writeheader()
            writer.writerows(self._log_rows)
        self._log_rows = []

    def run(self, progress_every: int = 0) -> str:
        cfg = self.cfg
        for it in range(cfg.total_iterations):
            row = self.step(it)
            if progress_every and it % progress_every == 0:
                print(f"[{it}/{cfg.total_iterations}] total={row['total']:.4f} "
                      f"gauss={row['n_gauss']}", flush=True)
            if it > 0 and it % cfg.checkpoint_interval == 0:
                save_checkpoint(self.ckpt_path, self.models, cfg, it,
                                self.box_min, self.box_max)
                self._last_good = self.ckpt_path
                self._flush_log()
        save_checkpoint(self.ckpt_path, self.models, cfg,
                        cfg.total_iterations, self.box_min, self.box_max)
        self._flush_log()
        return self.ckpt_path


# ---------------------------------------------------------------------------
# evaluation / export
# ---------------------------------------------------------------------------

def select_split(dataset: Dataset, split: str) -> list[FrameRecord]:
    if split == "all" or split == "train":
        frames = list(dataset.frames)
        if split == "train":
            frames = [f for i, f in enumerate(dataset.frames) if i % 8 != 0] \
                if len(dataset) >= 8 else frames
        return frames
    if split == "test":
        return [f for i, f in enumerate(dataset.frames) if i % 8 == 0]
    raise ValueError(f"unknown split {split!r} (use all/train/test)")


def render_eval(models: Models, cfg: TrainConfig, dataset: Dataset,
                split: str = "all", out_dir: str | None = None,
                deform_active: bool = True) -> MetricReport:
    """Render the splatting branch at the dataset cameras and score
    PSNR/SSIM against ground truth."""
    rcfg = RenderConfig(background=cfg.background, tau_d=cfg.tau_d,
                        tau_f=cfg.tau_f_frac * dataset.diagonal,
                        depth_filter_combine=cfg.depth_filter_combine,
                        sh_degree=cfg.sh_degree)
    report = MetricReport()
    deform = models.dgs_deform if (deform_active and cfg.use_deform) else None
    for fr in select_split(dataset, split):
        out = render(models.gaussians, fr.camera, rcfg, deform_fn=deform,
                     t=fr.time)
        img = np.clip(ad.value(out.color), 0.0, 1.0)
        report.add_frame(fr.index, fr.time, psnr(img, fr.image),
                         ssim_value(img, fr.image))
        if out_dir is not None:
            os.makedirs(out_dir, exist_ok=True)
            save_png(os.path.join(out_dir, f"render_{fr.index:03d}.png"), img)
    return report


def composite_sdf_fn(models: Models, t: float):
    """Observation-space signed distance at time t as a plain function."""
    if models.sdf_field is None:
        raise ValueError("surface branch not present in this checkpoint")

    def fn(p):
        return ad.value(sdf_eval(models.sdf_field, models.coupling, p, t))

    return fn


def export_mesh_sequence(models: Models, cfg: TrainConfig, timesteps,
                         resolution: int, out_dir: str, box_min, box_max,
                         dataset: Dataset | None = None,
                         n_metric_points: int = 10_000,
                         emd_iters: int = 300) -> MetricReport:
    """Extract one mesh per timestep through the deformation at that time;
    when the dataset carries GT meshes, report CD/EMD per timestep."""
    os.makedirs(out_dir, exist_ok=True)
    report = MetricReport()
    meshes = []
    for t in timesteps:
        if not 0.0 <= t <= 1.0:
            raise ValueError(f"timestep {t} outside [0, 1]")
        mesh = extract_mesh(composite_sdf_fn(models, t), box_min, box_max,
                            resolution=resolution)
        meshes.append((t, mesh))
        cd = emd = None
        extra = {"empty": mesh.is_empty}
        if dataset is not None and not mesh.is_empty:
            match = min(dataset.frames, key=lambda fr: abs(fr.time - t))
            if match.gt_mesh_path:
                gt = load_obj(match.gt_mesh_path)
                pred_pts = sample_surface_points(mesh, n_metric_points, seed=0)
                gt_pts = sample_surface_points(gt, n_metric_points, seed=1)
                cd = chamfer_distance(pred_pts, gt_pts)
                emd, emd_meta = earth_mover_distance(pred_pts, gt_pts,
                                                     iters=emd_iters)
                extra["emd_eps"] = emd_meta["eps"]
                extra["gt_frame"] = match.index
        report.add_timestep(t, cd, emd, **extra)
    save_mesh_sequence(meshes, out_dir)
    report.to_json(os.path.join(out_dir, "mesh_metrics.json"))
    return report
