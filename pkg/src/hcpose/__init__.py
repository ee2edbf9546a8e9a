"""Joint object pose estimation and categorization from layered part
realizations, with group-sparse models solved by sharing-form ADMM."""

__version__ = "0.1.0"

from .types import (DatasetManifest, ImageRecord, InputError, PartRealization,  # noqa: E402
                    to_centered_coords, to_pixel_coords)
from .features import (HogConfig, HopConfig, NumericalError, PartFeatureExtractor,  # noqa: E402
                       extract_features)
from .solver import (AdmmConfig, CategoryModel, PoseModel, SolverError,  # noqa: E402
                     admm_group_lasso, admm_lasso, admm_sparse_logistic, predict_category,
                     predict_pose)
from .estimators import (RelativeL1Logistic, RelativeLasso,  # noqa: E402
                         SharingGroupLassoRegressor, SharingL1LogisticClassifier)

__all__ = [
    "AdmmConfig", "CategoryModel", "DatasetManifest", "HogConfig", "HopConfig", "ImageRecord",
    "InputError", "NumericalError", "PartFeatureExtractor", "PartRealization", "PoseModel",
    "RelativeL1Logistic", "RelativeLasso", "SharingGroupLassoRegressor",
    "SharingL1LogisticClassifier", "SolverError", "admm_group_lasso", "admm_lasso",
    "admm_sparse_logistic", "extract_features", "predict_category", "predict_pose",
    "to_centered_coords", "to_pixel_coords",
]
