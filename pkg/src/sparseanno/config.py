"""Default hyperparameters shared by the library and the CLI."""

TAU = 0.9
FG_IOU = 0.5
GT_IOU = 0.8
ROI_IOU = 0.5
MIN_PRECISION = 0.5
CALIBRATION_IOU = 0.5
ORACLE_IOU = 0.5
SOFT_W_MIN = 0.25
WITHHELD_FRACTION = 0.2
MIN_INCLUDED = 0.9
MAX_CO_OCCUR = 0.5
COCO_IOU_THRESHOLDS = tuple(round(0.5 + 0.05 * k, 2) for k in range(10))
