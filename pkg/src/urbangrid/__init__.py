"""Analytics for grid-cell urban event logs.

Ingestion and cleaning, source/category summaries, spatio-temporal count
fields, temporal and spatial relevance curves, category mutual information
and a seeded synthetic data generator.
"""

__version__ = "0.1.0"
