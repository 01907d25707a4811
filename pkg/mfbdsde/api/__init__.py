"""
API package initialization file.
This package contains the HTTP routes for presets and experiment runs.
"""
