"""
Unit handling for bayesplat.

All internal state is SI: meters, seconds, and colors normalized to
[0, 1]. This module holds the conversions used where data enters or leaves the
system (sensor depth codes, 8-bit images, report display).
"""

from dataclasses import dataclass
from typing import Dict, Optional

import numpy as np

# Largest value a 16-bit depth PNG can hold
UINT16_MAX = 65535


@dataclass
class UnitConversion:
    """Unit conversion factors and display information."""

    factor: float  # SI value per display unit
    symbol: str  # Unit symbol for display
    precision: int = 3  # Decimal places for display


class UnitManager:
    """Converts SI values to the units a report is written in."""

    def __init__(self):
        self._conversions = self._setup_conversions()

    def _setup_conversions(self) -> Dict[str, Dict[str, UnitConversion]]:
        return {
            "length": {
                "m": UnitConversion(1.0, "m", 4),
                "cm": UnitConversion(0.01, "cm", 3),
                "mm": UnitConversion(0.001, "mm", 2),
            },
            "time": {
                "s": UnitConversion(1.0, "s", 3),
                "ms": UnitConversion(0.001, "ms", 2),
            },
            "rate": {
                "fps": UnitConversion(1.0, "FPS", 2),
            },
            "ratio": {
                "dB": UnitConversion(1.0, "dB", 2),
            },
        }

    def get_conversion(self, unit_type: str, unit: str) -> UnitConversion:
        """Get conversion information for a specific unit."""
        try:
            return self._conversions[unit_type][unit]
        except KeyError:
            raise ValueError(f"unknown unit '{unit}' for {unit_type}") from None

    def convert_to_display(self, value: float, unit_type: str, unit: str) -> float:
        return value / self.get_conversion(unit_type, unit).factor

    def format_value(self, value: Optional[float], unit_type: str, unit: str) -> str:
        """Format an SI value with its display unit; missing values render as blank."""
        if value is None or not np.isfinite(value):
            return ""
        conversion = self.get_conversion(unit_type, unit)
        return f"{value / conversion.factor:.{conversion.precision}f} {conversion.symbol}"


# Global unit manager instance
_unit_manager = UnitManager()


def get_unit_manager() -> UnitManager:
    """Get the global unit manager instance."""
    return _unit_manager


# =============================================================================
# SENSOR AND IMAGE CONVERSIONS
# =============================================================================


def depth_to_meters(raw: np.ndarray, depth_scale: float) -> np.ndarray:
    """Convert raw depth codes (or float meters when depth_scale is 1) to meters."""
    if depth_scale <= 0:
        raise ValueError(f"depth_scale must be positive, got {depth_scale}")
    return np.asarray(raw, dtype=np.float64) / depth_scale


def meters_to_depth(depth: np.ndarray, depth_scale: float) -> np.ndarray:
    """Quantize metric depth to 16-bit sensor codes; non-finite and non-positive depth become 0."""
    depth = np.asarray(depth, dtype=np.float64)
    valid = np.isfinite(depth) & (depth > 0)
    codes = np.zeros(depth.shape, dtype=np.uint16)
    codes[valid] = np.clip(np.rint(depth[valid] * depth_scale), 0, UINT16_MAX).astype(np.uint16)
    return codes


def color_to_unit(image: np.ndarray) -> np.ndarray:
    """8-bit channels to [0, 1] floats."""
    return np.asarray(image, dtype=np.float64) / 255.0


def unit_to_color(image: np.ndarray) -> np.ndarray:
    """[0, 1] floats to 8-bit channels, rounded and clipped."""
    return np.clip(np.rint(np.asarray(image, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


# =============================================================================
# DISPLAY HELPERS
# =============================================================================


def meters_to_cm(value: float) -> float:
    return _unit_manager.convert_to_display(value, "length", "cm")


def format_length_cm(value_m: Optional[float]) -> str:
    """Format a length given in meters as centimeters."""
    return _unit_manager.format_value(value_m, "length", "cm")


def format_db(value: Optional[float]) -> str:
    return _unit_manager.format_value(value, "ratio", "dB")


def format_fps(value: Optional[float]) -> str:
    return _unit_manager.format_value(value, "rate", "fps")
