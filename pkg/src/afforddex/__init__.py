"""Affordance-guided dexterous grasp generation on synthetic tabletop scenes.

Modules: geometry (point-cloud queries), hand (kinematics and SDF),
affordance (contact maps), neural (numpy networks), flow (flow matching
models), optimize (grasp refinement), metrics, data (scene and grasp
generation), cli (pipeline stages).
"""

__version__ = "0.1.0"
