"""
data.py - Pure data constants for ddt-rl.

No logic. Parameter sets, name tables and lookup dicts used by the other modules.
"""

# ---------------------------------------------------------------------------
# Sweeps
# ---------------------------------------------------------------------------

# Leaf counts considered by architecture sweeps
SWEEP_LEAF_COUNTS = [2, 4, 8, 16, 32]

# ---------------------------------------------------------------------------
# Name tables (used by crisp export)
# ---------------------------------------------------------------------------

CHAIN_FEATURES = ["s"]
CHAIN_ACTIONS = ["a1", "a2"]

CARTPOLE_FEATURES = ["cart_position", "cart_velocity", "pole_angle", "pole_angular_velocity"]
CARTPOLE_ACTIONS = ["left", "right"]

WILDFIRE_FEATURES = [
    "fire1_dist_north",
    "fire1_dist_west",
    "closer_to_fire1",
    "fire2_dist_north",
    "fire2_dist_west",
    "closer_to_fire2",
]
WILDFIRE_ACTIONS = ["north", "east", "south", "west", "nothing"]

# Wildfire unit move vectors (east, north) per action index
WILDFIRE_MOVES = {
    0: (0.0, 1.0),
    1: (1.0, 0.0),
    2: (0.0, -1.0),
    3: (-1.0, 0.0),
    4: (0.0, 0.0),
}

# ---------------------------------------------------------------------------
# Output file names
# ---------------------------------------------------------------------------

ANALYSIS_CURVES = {
    "delta_phi_q": "delta_phi_q.csv",
    "delta_phi_pg": "delta_phi_pg.csv",
    "optimality_q": "optimality_q.csv",
    "optimality_pg": "optimality_pg.csv",
    "policy_value": "policy_value.csv",
}
ANALYSIS_SUMMARY = "summary.json"
SUMMARY_SCHEMA_VERSION = 1

CURVE_FILE = "curve.csv"
MANIFEST_FILE = "manifest.json"
MODEL_FILE = "model.json"
DISCRETIZED_FILE = "crisp.json"
TEXT_FILE = "policy.txt"
DOT_FILE = "policy.dot"
SWEEP_FILE = "sweep.csv"
