"""
Configuration settings for the FAQ KG matcher.
Loads environment variables from .env file.
"""
import os
from dotenv import load_dotenv

# Load environment variables from .env file
load_dotenv()

PROJECT_ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))

# Knowledge graph files
KG_ENTITIES_PATH = os.getenv('KG_ENTITIES_PATH', os.path.join(PROJECT_ROOT, 'data', 'kg', 'entities.jsonl'))
KG_TRIPLES_PATH = os.getenv('KG_TRIPLES_PATH', os.path.join(PROJECT_ROOT, 'data', 'kg', 'triples.jsonl'))
KG_PATTERNS_PATH = os.getenv('KG_PATTERNS_PATH', os.path.join(PROJECT_ROOT, 'data', 'kg', 'patterns.jsonl'))
FAQ_INDEX_PATH = os.getenv('FAQ_INDEX_PATH', os.path.join(PROJECT_ROOT, 'data', 'faq_index.tsv'))

# Anchoring
RB_WEIGHTS_PATH = os.getenv('RB_WEIGHTS_PATH', os.path.join(PROJECT_ROOT, 'config', 'rb_weights.json'))
TOKENIZE_MODE = os.getenv('TOKENIZE_MODE', 'whitespace')
ANCHOR_THRESHOLD = float(os.getenv('ANCHOR_THRESHOLD', 0.5))
RB_WEIGHT = float(os.getenv('RB_WEIGHT', 0.3))
NTD_WEIGHT = float(os.getenv('NTD_WEIGHT', 0.7))

# Neural triple disambiguation model
NTD_MODEL_PATH = os.getenv('NTD_MODEL_PATH', os.path.join(PROJECT_ROOT, 'models', 'ntd_model.joblib'))
NTD_BUCKETS = int(os.getenv('NTD_BUCKETS', 16384))
NTD_DIM = int(os.getenv('NTD_DIM', 32))

# Matcher
MATCHER_CHECKPOINT_PATH = os.getenv('MATCHER_CHECKPOINT_PATH', os.path.join(PROJECT_ROOT, 'models', 'matcher.ckpt'))
ANCHOR_CACHE_PATH = os.getenv('ANCHOR_CACHE_PATH', os.path.join(PROJECT_ROOT, 'models', 'anchor_cache.jsonl'))
MAX_TOKENS = int(os.getenv('MAX_TOKENS', 32))
MAX_ENTITIES = int(os.getenv('MAX_ENTITIES', 16))
MAX_TRIPLES = int(os.getenv('MAX_TRIPLES', 8))

# Runs
DEFAULT_SEED = int(os.getenv('DEFAULT_SEED', 13))
EVAL_WORKERS = int(os.getenv('EVAL_WORKERS', 1))
REPL_TOP_K = int(os.getenv('REPL_TOP_K', 5))
LOG_LEVEL = os.getenv('LOG_LEVEL', 'INFO')

# Testing Configuration
RUN_SLOW_TESTS = os.getenv('RUN_SLOW_TESTS', 'false').lower() == 'true'
