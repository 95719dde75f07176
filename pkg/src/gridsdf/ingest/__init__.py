"""Data ingestion: COLMAP text exports, PFM/PNG maps and analytic synthetic scenes."""
