"""
Módulos do preditor de trajetórias capsmap
"""
