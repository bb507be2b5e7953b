"""Data ingestion, serialization, metrics, pipelines, reports and the CLI."""
