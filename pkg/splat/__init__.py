"""可微高斯渲染模块"""
from .gaussians import (Gaussian3D, GaussianCloud, inverse_sigmoid, load_ply, quaternion_matrices,
                        save_ply, sigmoid, storage_megabytes)
from .metrics import mse, psnr, psnr_from_mse, ssim, ssim_with_grad
from .rasterizer import (CloudGradients, ProjectedCloud, RenderResult, Splat2D, backward,
                         project_cloud, project_gaussian, rasterize, render, render_with_gradients)

__all__ = [
    'Gaussian3D', 'GaussianCloud', 'inverse_sigmoid', 'load_ply', 'quaternion_matrices',
    'save_ply', 'sigmoid', 'storage_megabytes',
    'mse', 'psnr', 'psnr_from_mse', 'ssim', 'ssim_with_grad',
    'CloudGradients', 'ProjectedCloud', 'RenderResult', 'Splat2D', 'backward',
    'project_cloud', 'project_gaussian', 'rasterize', 'render', 'render_with_gradients',
]
