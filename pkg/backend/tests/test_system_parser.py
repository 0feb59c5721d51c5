import json
import tempfile
import unittest
from pathlib import Path

import numpy as np
from numpy.testing import assert_allclose

from errors import SystemFileError
from experiments import builtin_system
from system_parser import SystemParser, system_to_dict

TRIAD_TEXT = """{
  "name": "triad",
  "d": 3,
  "s": 3,
  "lambda": [-1, 0, 0, 0, -1, 0, 0, 0, -1],
  "gamma": [0, 0, 0, 0, 0, 0.25, 0, 0.25, 0,
            0, 0, -0.15, 0, 0, 0, -0.15, 0, 0,
            0, -0.1, 0, -0.1, 0, 0, 0, 0, 0],
  "forcing": {"kind": "constant", "value": [0, 0, 0]},
  "noise": {"kind": "constant", "value": [0.8, 0, 0, 0, 0.6, 0, 0, 0, 0.6]},
  "energy_conserving": true
}
"""


class TestSystemParser(unittest.TestCase):
    def setUp(self):
        self.parser = SystemParser()

    def test_parse_valid_file(self):
        system = self.parser.parse_text(TRIAD_TEXT)
        self.assertEqual(system.name, "triad")
        self.assertEqual(system.d, 3)
        self.assertTrue(system.energy_conserving)
        assert_allclose(system.lam, -np.eye(3))
        self.assertEqual(system.gamma[0, 1, 2], 0.25)
        assert_allclose(system.noise(0.0), np.diag([0.8, 0.6, 0.6]))

    def test_load_from_disk(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / "triad.json"
            path.write_text(TRIAD_TEXT)
            system = self.parser.load(path)
        self.assertEqual(system.s, 3)

    def test_rejects_other_extensions(self):
        with self.assertRaises(SystemFileError):
            self.parser.load("system.yaml")

    def test_invalid_json_reports_line(self):
        with self.assertRaises(SystemFileError) as ctx:
            self.parser.parse_text('{\n  "d": 1,\n  "s": 1\n  "lambda": [0]\n}')
        self.assertEqual(ctx.exception.line, 4)

    def test_missing_key_reports_path(self):
        data = json.loads(TRIAD_TEXT)
        del data["lambda"]
        with self.assertRaises(SystemFileError) as ctx:
            self.parser.parse_dict(data)
        self.assertEqual(ctx.exception.key_path, "lambda")
        self.assertEqual(ctx.exception.exit_code, 2)

    def test_wrong_shape_reports_key_and_line(self):
        text = TRIAD_TEXT.replace('"lambda": [-1, 0, 0, 0, -1, 0, 0, 0, -1]', '"lambda": [-1, 0, 0]')
        with self.assertRaises(SystemFileError) as ctx:
            self.parser.parse_text(text)
        self.assertEqual(ctx.exception.key_path, "lambda")
        self.assertEqual(ctx.exception.line, 5)

    def test_unknown_profile_kind(self):
        data = json.loads(TRIAD_TEXT)
        data["forcing"] = {"kind": "ramp"}
        with self.assertRaises(SystemFileError) as ctx:
            self.parser.parse_dict(data)
        self.assertEqual(ctx.exception.key_path, "forcing.kind")

    def test_energy_flag_checked(self):
        data = json.loads(TRIAD_TEXT)
        data["gamma"][5] = 1.0
        with self.assertRaises(SystemFileError) as ctx:
            self.parser.parse_dict(data)
        self.assertEqual(ctx.exception.key_path, "energy_conserving")

    def test_piecewise_and_decaying_profiles(self):
        data = {
            "d": 1, "s": 1, "lambda": [-1], "gamma": [0.5],
            "forcing": {"kind": "piecewise", "times": [0, 1], "values": [[0.0], [2.0]]},
            "noise": {"kind": "decaying", "value": [1.0], "rate": 2.0},
        }
        system = self.parser.parse_dict(data)
        self.assertEqual(float(system.forcing(1.5)[0]), 2.0)
        self.assertAlmostEqual(float(system.noise(1.0)[0, 0]), np.exp(-2.0))

    def test_piecewise_breakpoints_increasing(self):
        data = {
            "d": 1, "s": 1, "lambda": [-1], "gamma": [0.0],
            "forcing": {"kind": "piecewise", "times": [1, 0], "values": [[0.0], [2.0]]},
        }
        with self.assertRaises(SystemFileError) as ctx:
            self.parser.parse_dict(data)
        self.assertEqual(ctx.exception.key_path, "forcing.times")

    def test_dict_export_parses_back(self):
        system = builtin_system("l96s")
        again = self.parser.parse_dict(system_to_dict(system))
        assert_allclose(again.gamma, system.gamma)
        assert_allclose(again.forcing(0.0), system.forcing(0.0))
        self.assertEqual(again.name, "l96s")


if __name__ == "__main__":
    unittest.main()
