"""
Data package: Adult schema, ingest, encoding, splits and the synthetic oracle
"""
