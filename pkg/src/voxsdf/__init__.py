"""Sparse-voxel neural signed distance fields with progressive prune/split training."""
from .field import AnalyticField, FieldModel, gamma, positional_encode
from .renderer import RenderConfig, render_image, render_rays
from .trainer import TrainConfig, load_checkpoint, run_training, save_checkpoint
from .voxgrid import VoxelGrid, init_grid, prune, split

__all__ = ["AnalyticField", "FieldModel", "gamma", "positional_encode", "RenderConfig", "render_image",
           "render_rays", "TrainConfig", "load_checkpoint", "run_training", "save_checkpoint", "VoxelGrid",
           "init_grid", "prune", "split"]
