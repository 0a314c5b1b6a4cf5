"""Multi-future trajectory prediction on forking gridworld scenarios."""
__version__ = '0.1'
