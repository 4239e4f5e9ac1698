"""Push-T on the ground plane: environment, scripted expert, demos, augmentation."""

from .env import (SETUPS, PushTConfig, PushTState, observe, reset, reward, step)
from .expert import scripted_expert
from .demos import Demo, augment, load_demo, save_demo

__all__ = ["SETUPS", "PushTConfig", "PushTState", "observe", "reset", "reward", "step",
           "scripted_expert", "Demo", "augment", "load_demo", "save_demo"]
