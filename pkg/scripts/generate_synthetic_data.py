#!/usr/bin/env python3
"""
Script to generate the synthetic corpus and train an NTD model on it.
"""
import argparse
import logging
import os
import sys

# Get the project root directory
project_root = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
# Add the project root to the Python path
sys.path.insert(0, project_root)

from src import config
from src.kg_store import KGLoadError, load_kg
from src.synthetic_data import get_synthetic_generator
from src.train_eval import DatasetError, NtdTrainConfig, load_disamb_dataset, train_ntd

# Configure logging
logging.basicConfig(
    level=logging.INFO,
    format='%(asctime)s - %(name)s - %(levelname)s - %(message)s'
)
logger = logging.getLogger(__name__)


def main():
    """Generate synthetic matching and disambiguation data."""
    parser = argparse.ArgumentParser(description='Generate the synthetic FAQ corpus.')
    parser.add_argument('--output-dir', default=os.path.join(project_root, 'data', 'synthetic'))
    parser.add_argument('--match', type=int, default=3000, help='Number of matching pairs')
    parser.add_argument('--disamb', type=int, default=1500, help='Number of disambiguation queries')
    parser.add_argument('--seed', type=int, default=config.DEFAULT_SEED)
    parser.add_argument('--train-ntd', action='store_true', help='Also train and save the NTD model')
    parser.add_argument('--verbose', action='store_true', help='Show detailed information')
    args = parser.parse_args()

    if args.verbose:
        logging.getLogger().setLevel(logging.DEBUG)

    try:
        kg = load_kg(config.KG_ENTITIES_PATH, config.KG_TRIPLES_PATH)
        paths = get_synthetic_generator(kg, args.seed).write_corpus(args.output_dir, args.match, args.disamb)
        if args.train_ntd:
            model = train_ntd(load_disamb_dataset(paths["disamb"]), NtdTrainConfig(seed=args.seed), kg)
            model.save(config.NTD_MODEL_PATH)
    except (KGLoadError, DatasetError) as e:
        logger.error(f"Synthetic data generation failed: {e}")
        return 1

    logger.info(f"Synthetic corpus written to {args.output_dir}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
