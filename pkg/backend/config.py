"""
Configuration settings for the demand-dispatch allocation solver
"""

import os

from dotenv import load_dotenv

load_dotenv()


class Config:
    """Base configuration class with solver defaults"""

    # Logging settings
    DEBUG = False  # forces DEBUG log level when set
    LOG_LEVEL = os.environ.get('LOG_LEVEL', 'INFO')
    LOG_FORMAT = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'
    LOG_FILE = os.environ.get('DISPATCH_LOG_FILE')

    # Time grid (hours)
    DEFAULT_HORIZON_HOURS = float(os.environ.get('DEFAULT_HORIZON_HOURS', 24.0))
    DEFAULT_STEPS = int(os.environ.get('DEFAULT_STEPS', 576))  # 2.5-minute steps
    DEFAULT_SCHEME = os.environ.get('DEFAULT_SCHEME', 'trapezoidal')
    SCHEMES = ('euler', 'trapezoidal')

    # Generation defaults when a scenario leaves them out
    DEFAULT_KAPPA_G = 1.0
    DEFAULT_RAMP_KAPPA = 1.0

    # Newton-KKT settings
    NEWTON_TOL = float(os.environ.get('NEWTON_TOL', 1e-9))
    NEWTON_MAX_ITERS = int(os.environ.get('NEWTON_MAX_ITERS', 100))
    BACKTRACK_FACTOR = 0.5
    MAX_BACKTRACKS = 30
    DENSE_FALLBACK_LIMIT = 2000  # KKT size below which a dense solve is used

    # Cost function settings
    INV_D1_BRACKET_FACTOR = 10.0  # bracket half-width in units of capacity
    INV_D1_TOL = 1e-12

    # Certification tolerances
    COSTATE_RTOL = float(os.environ.get('COSTATE_RTOL', 1e-6))
    GAP_RTOL = float(os.environ.get('GAP_RTOL', 1e-5))
    CHECK_RESIDUAL_RTOL = float(os.environ.get('CHECK_RESIDUAL_RTOL', 5e-2))
    BALANCE_RTOL = 1e-8
    TERMINAL_COSTATE_FACTOR = 2.0  # last-interval multipliers must stay within this many h
    DEFAULT_SKIP_NODES = 1
    MIN_CHECK_STEPS = 8
    SUM_MISMATCH_TOL = 1e-9
    SINGULAR_PAIR_TOL = 1e-12

    # Sweep parallelism
    DISPATCH_THREADS = int(os.environ.get('DISPATCH_THREADS', os.cpu_count() or 1))

    # Output settings
    FLOAT_FORMAT = '%.17g'
    SOLUTION_FILE = 'solution.csv'
    RESIDUAL_FILE = 'residuals.json'
    PRICE_FILE = 'prices.json'
    MANIFEST_FILE = 'manifest.json'
    RECOVERY_FILE = 'recovery.csv'
    SWEEP_FILE = 'sweep.json'
    RECOVERY_SUMMARY_FILE = 'recovery_summary.json'

    # Reference scenarios shipped with the backend
    SCENARIO_DIR = os.path.join(os.path.dirname(os.path.abspath(__file__)), 'scenarios')


class DevelopmentConfig(Config):
    """Development configuration"""
    DEBUG = True


class ProductionConfig(Config):
    """Production configuration"""
    DEBUG = False


class TestingConfig(Config):
    """Testing configuration"""
    DEBUG = True


# Configuration dictionary
config = {
    'development': DevelopmentConfig,
    'production': ProductionConfig,
    'testing': TestingConfig,
    'default': ProductionConfig
}
