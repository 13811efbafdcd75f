"""3D頭部アバターの逐次反転 - メインパッケージ"""
__version__ = "0.1.0"
