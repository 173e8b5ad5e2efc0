"""
Configuration settings for the splatdrive 4D scene synthesis engine.
"""
import os

import psutil
from dotenv import load_dotenv

# Load environment variables from .env file
load_dotenv()

# Logging
LOG_LEVEL = os.getenv('SPLATDRIVE_LOG_LEVEL', 'INFO').upper()
LOG_FORMAT = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'

# Worker threads for tile rendering and torch intra-op parallelism
THREADS = int(os.getenv('SPLATDRIVE_THREADS', str(psutil.cpu_count(logical=False) or 1)))

# Convention string recorded in every file header and manifest
COORDINATE_CONVENTION = "wxyz-hamilton-c2w"
FORMAT_VERSION = 1

# Geometry
NEAR_PLANE = float(os.getenv('SPLATDRIVE_NEAR_PLANE', '0.01'))
QUATERNION_TOLERANCE = 1e-6

# Gaussian activations
D_MIN = float(os.getenv('SPLATDRIVE_D_MIN', '0.1'))
DELTA_MAX = float(os.getenv('SPLATDRIVE_DELTA_MAX', '0.5'))
SCALE_RAW_MIN = -8.0
SCALE_RAW_MAX = 4.0
OPACITY_EPS = 1e-7
MASK_THRESHOLD = float(os.getenv('SPLATDRIVE_MASK_THRESHOLD', '0.5'))

# Rasterizer
TILE_SIZE = int(os.getenv('SPLATDRIVE_TILE_SIZE', '16'))
ALPHA_MAX = 0.99
ALPHA_MIN = 1.0 / 255.0
MIN_TRANSMITTANCE = 1e-4
COV_DILATION = float(os.getenv('SPLATDRIVE_COV_DILATION', '0.3'))
FOOTPRINT_SIGMA = float(os.getenv('SPLATDRIVE_FOOTPRINT_SIGMA', '3.0'))
# Binning cutoff when the skip/early-out thresholds are disabled
EXACT_ALPHA_CUTOFF = 1e-12
DEPTH_ALPHA_FLOOR = 1e-6

# Rectified flow
EULER_STEPS = int(os.getenv('SPLATDRIVE_EULER_STEPS', '8'))
FLOW_WIDTH = int(os.getenv('SPLATDRIVE_FLOW_WIDTH', '128'))
FLOW_HIDDEN_LAYERS = int(os.getenv('SPLATDRIVE_FLOW_HIDDEN_LAYERS', '3'))
S_EMBED_DIM = 16
COND_WIDTH = int(os.getenv('SPLATDRIVE_COND_WIDTH', '32'))
COND_DROPOUT = float(os.getenv('SPLATDRIVE_COND_DROPOUT', '0.1'))
GUIDANCE_WEIGHT = float(os.getenv('SPLATDRIVE_GUIDANCE_WEIGHT', '1.0'))
FLOW_LR = float(os.getenv('SPLATDRIVE_FLOW_LR', '1e-3'))
FLOW_MOMENTUM = float(os.getenv('SPLATDRIVE_FLOW_MOMENTUM', '0.9'))
FLOW_BATCH_SIZE = int(os.getenv('SPLATDRIVE_FLOW_BATCH_SIZE', '64'))
GRAD_CLIP = float(os.getenv('SPLATDRIVE_GRAD_CLIP', '10.0'))
REFINER_MIX_RATIO = float(os.getenv('SPLATDRIVE_REFINER_MIX_RATIO', '0.5'))
FLOW_TRAIN_STEPS = int(os.getenv('SPLATDRIVE_FLOW_TRAIN_STEPS', '5000'))
REFINER_TRAIN_STEPS = int(os.getenv('SPLATDRIVE_REFINER_TRAIN_STEPS', '3000'))

# Latent Gaussian decoder
DECODER_WIDTH = int(os.getenv('SPLATDRIVE_DECODER_WIDTH', '32'))
DECODER_HEADS = int(os.getenv('SPLATDRIVE_DECODER_HEADS', '4'))
DECODER_BLOCKS = int(os.getenv('SPLATDRIVE_DECODER_BLOCKS', '2'))
DECODER_UPSAMPLE_STAGES = 2
DECODER_LR = float(os.getenv('SPLATDRIVE_DECODER_LR', '1e-3'))
DECODER_OPTIMIZER = os.getenv('SPLATDRIVE_DECODER_OPTIMIZER', 'adam')
LAMBDA_PERCEPTUAL = float(os.getenv('SPLATDRIVE_LAMBDA_PERCEPTUAL', '0.0'))
LAMBDA_DEPTH = float(os.getenv('SPLATDRIVE_LAMBDA_DEPTH', '1.0'))
LAMBDA_SEG = float(os.getenv('SPLATDRIVE_LAMBDA_SEG', '0.5'))
# Initial scale of predicted Gaussians (meters) before training moves it
DECODER_INIT_SCALE = 0.05
DECODER_INIT_DEPTH = 10.0
DECODER_TRAIN_STEPS = int(os.getenv('SPLATDRIVE_DECODER_TRAIN_STEPS', '5000'))
DECODER_CLIP_LEN = int(os.getenv('SPLATDRIVE_DECODER_CLIP_LEN', '4'))
DECODER_TARGETS = int(os.getenv('SPLATDRIVE_DECODER_TARGETS', '2'))
CHECKPOINT_EVERY = int(os.getenv('SPLATDRIVE_CHECKPOINT_EVERY', '500'))
LOG_EVERY = int(os.getenv('SPLATDRIVE_LOG_EVERY', '100'))

# Conditions
BEV_RESOLUTION = int(os.getenv('SPLATDRIVE_BEV_RESOLUTION', '64'))
BEV_EXTENT = float(os.getenv('SPLATDRIVE_BEV_EXTENT', '32.0'))
BEV_CHANNELS = ("lane", "boundary")
SCENE_TAGS = tuple(os.getenv('SPLATDRIVE_SCENE_TAGS', 'urban,suburban,highway,night').split(','))
BOX_CLASSES = ("car", "truck")
ENCODER_HIDDEN = int(os.getenv('SPLATDRIVE_ENCODER_HIDDEN', '32'))
SKETCH_POOL = 4
DELTA_Y_VALUES = tuple(float(v) for v in os.getenv('SPLATDRIVE_DELTA_Y', '-4,-2,-1,1,2,4').split(','))

# Synthetic scenes
SYNTH_VIEWS = int(os.getenv('SPLATDRIVE_SYNTH_VIEWS', '2'))
SYNTH_FRAMES = int(os.getenv('SPLATDRIVE_SYNTH_FRAMES', '4'))
SYNTH_HEIGHT = int(os.getenv('SPLATDRIVE_SYNTH_HEIGHT', '32'))
SYNTH_WIDTH = int(os.getenv('SPLATDRIVE_SYNTH_WIDTH', '32'))
SYNTH_STATIC = int(os.getenv('SPLATDRIVE_SYNTH_STATIC', '1200'))
SYNTH_DYNAMIC = int(os.getenv('SPLATDRIVE_SYNTH_DYNAMIC', '2'))
SYNTH_GAUSSIANS_PER_VEHICLE = 40
SYNTH_EGO_SPEED = 2.0   # meters per frame along the ego x axis
SYNTH_FRAME_DT = 0.5    # seconds between frames
SYNTH_CAMERA_HEIGHT = 1.5
SYNTH_FOV_DEGREES = 80.0
SYNTH_BACKGROUND = (0.55, 0.70, 0.90)
LATENT_DOWNSAMPLE = 2 ** DECODER_UPSAMPLE_STAGES

# Inference outputs
OUTPUT_DIR = os.getenv('SPLATDRIVE_OUTPUT_DIR', 'outputs')
