"""Network builders, stage wrappers and the training loop."""
from .stages import (
    ChannelMeanBlock,
    CropMethod,
    IdentityBlock,
    PadRecord,
    PatchRefiner,
    SingleSlice,
    SinogramCompletion,
    SliceWindow,
    SpatialAAE,
    assemble_corners,
    build_aae,
    clamped_windows,
    crop_corners,
    pad_reflect,
    random_crops,
    unpad,
)
from .training import ArrayDataset, TrainConfig, TrainLog, train_stage, write_log
from .unet import Discriminator, Encoder, NetSpec, UNet, table_param_count
