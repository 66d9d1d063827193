"""
Configuration settings for the UWB variational estimation toolkit.
"""
import os
from dotenv import load_dotenv

# Load environment variables from .env file if it exists
load_dotenv()

# Logging configuration
LOG_LEVEL = os.getenv('LOG_LEVEL', 'INFO')
LOG_FORMAT = os.getenv('LOG_FORMAT', '%(asctime)s - %(name)s - %(levelname)s - %(message)s')

# Experiment configuration
CONFIG_DIR = os.path.dirname(os.path.abspath(__file__))
DEFAULT_EXPERIMENT_CONFIG = os.getenv(
    'DEFAULT_EXPERIMENT_CONFIG', os.path.join(CONFIG_DIR, 'default_experiment.json')
)

# Output configuration
OUTPUT_DIR = os.getenv('OUTPUT_DIR', 'output')
CSV_FLOAT_FORMAT = os.getenv('CSV_FLOAT_FORMAT', '%.17g')

# Monte Carlo configuration
JOBS = int(os.getenv('JOBS', 1))

# Truth/estimate alignment, as a fraction of the state period
ALIGNMENT_TOLERANCE_FRACTION = float(os.getenv('ALIGNMENT_TOLERANCE_FRACTION', 0.5))
