"""
Modules package for the proxy-label pipeline
Submodules are imported directly (``from modules.clustering import kmeans``).
"""
