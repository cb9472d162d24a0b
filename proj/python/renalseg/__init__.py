# renalseg: cascaded 3D U-Net segmentation of 4D DCE volumes
#
# Copyright 2026 The renalseg Authors
#
# Licensed under the Apache License, Version 2.0 (the "License");
# you may not use this file except in compliance with the License.
# You may obtain a copy of the License at
#
#     http://www.apache.org/licenses/LICENSE-2.0
#
# Unless required by applicable law or agreed to in writing, software
# distributed under the License is distributed on an "AS IS" BASIS,
# WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
# See the License for the specific language governing permissions and
# limitations under the License.

"""Cascaded 3D U-Net kidney segmentation of 4D DCE volumes.

Arrays are numpy, channel-first: volumes are float32 [T, D, H, W] and label
maps uint8 [D, H, W] (0 background, 1 right kidney, 2 left kidney). Voxel
spacing is given in millimetres as (x, y, z).
"""

from ._renalseg import (
    FormatError,
    Predictor,
    confusion,
    evaluate,
    fit_pca_time,
    gamma_variate,
    generate_phantom,
    gradcheck,
    num_threads,
    parameter_count,
    read_labels,
    read_volume,
    resample_time,
    resample_trilinear,
    set_num_threads,
    volumetric_error_ml,
    write_labels,
    write_volume,
)

__all__ = [
    "FormatError",
    "Predictor",
    "confusion",
    "evaluate",
    "fit_pca_time",
    "gamma_variate",
    "generate_phantom",
    "gradcheck",
    "num_threads",
    "parameter_count",
    "read_labels",
    "read_volume",
    "resample_time",
    "resample_trilinear",
    "set_num_threads",
    "volumetric_error_ml",
    "write_labels",
    "write_volume",
]
