import unittest
import json
import logging
import os
import sys
import tempfile
import shutil
from unittest.mock import patch

# Adjust path to import from src
project_root = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
sys.path.insert(0, os.path.join(project_root, 'src'))

from qmr_motion.config import (Config, DEFAULT_CONFIG, MOLLI_INVERSION_TIMES_MS, PhantomConfig, RpcaConfig,
                               Similarity)
from qmr_motion.errors import ConfigError, StageError, exit_code_for, ValidationError
from qmr_motion.logging_config import resolve_level, setup_logging


class TestConfig(unittest.TestCase):

    def setUp(self):
        # Create a temporary directory for config files
        self.test_dir = tempfile.mkdtemp()

        self.custom_config_data = {
            "registration": {"rounds": 5, "similarity": "ncc"},
            "evaluation": {"roi_labels": ["myocardium"]},
        }
        self.custom_config_path = os.path.join(self.test_dir, "custom.json")
        with open(self.custom_config_path, 'w') as f:
            json.dump(self.custom_config_data, f)

    def tearDown(self):
        # Remove the temporary directory and its contents
        shutil.rmtree(self.test_dir)

    def _write(self, name, text):
        path = os.path.join(self.test_dir, name)
        with open(path, 'w', encoding='utf-8') as f:
            f.write(text)
        return path

    def test_load_default_config(self):
        """Verify that Config loads DEFAULT_CONFIG when no custom path is provided."""
        config_manager = Config()
        self.assertEqual(config_manager.get_config(), DEFAULT_CONFIG)
        self.assertEqual(config_manager.experiment_name, "phantom-experiment")
        self.assertEqual(config_manager.registration_config().similarity, Similarity.NMI)

    def test_merge_is_deep(self):
        """Sections are merged key by key; lists replace the default."""
        config_manager = Config(custom_config_path=self.custom_config_path)
        registration = config_manager.section("registration")
        self.assertEqual(registration["rounds"], 5)
        self.assertEqual(registration["lambda_smooth"], DEFAULT_CONFIG["registration"]["lambda_smooth"])
        self.assertEqual(config_manager.section("evaluation")["roi_labels"], ["myocardium"])
        self.assertEqual(config_manager.registration_config().similarity, Similarity.NCC)

    def test_dict_takes_priority_over_path(self):
        config_manager = Config(custom_config_path=self.custom_config_path,
                                custom_config_dict={"registration": {"rounds": 2}})
        self.assertEqual(config_manager.section("registration")["rounds"], 2)
        self.assertEqual(config_manager.section("registration")["similarity"], "nmi")

    def test_override_after_loading(self):
        config_manager = Config(custom_config_path=self.custom_config_path)
        config_manager.override({"registration": {"steps_per_round": 7}})
        registration = config_manager.registration_config()
        self.assertEqual((registration.rounds, registration.steps_per_round), (5, 7))

    def test_yaml_and_toml(self):
        yaml_path = self._write("c.yaml", "phantom:\n  amplitude: 2.5\n  seed: 9\n")
        self.assertEqual(Config(custom_config_path=yaml_path).phantom_config().amplitude, 2.5)
        toml_path = self._write("c.toml", "[rpca]\nrank = 3\nsparse_fraction = 0.2\n")
        rpca = Config(custom_config_path=toml_path).rpca_config()
        self.assertEqual((rpca.rank, rpca.sparse_fraction), (3, 0.2))

    def test_missing_or_unparsable_file(self):
        """A missing file or broken syntax is a ConfigError (exit code 2)."""
        with self.assertRaises(ConfigError):
            Config(custom_config_path=os.path.join(self.test_dir, "nope.json"))
        with self.assertRaises(ConfigError):
            Config(custom_config_path=self._write("bad.json", "{not json"))
        with self.assertRaises(ConfigError):
            Config(custom_config_path=self._write("list.yaml", "- 1\n- 2\n"))

    def test_invalid_values(self):
        """Out-of-range parameters surface as ConfigError from the typed accessors."""
        with self.assertRaises(ConfigError):
            Config(custom_config_dict={"registration": {"ncc_window": 8}}).registration_config()
        with self.assertRaises(ConfigError):
            Config(custom_config_dict={"rpca": {"sparse_fraction": 0.0}}).rpca_config()
        with self.assertRaises(ConfigError):
            Config(custom_config_dict={"registration": {"unknown_key": 1}}).registration_config()
        with self.assertRaises(ConfigError):
            Config(custom_config_dict={"phantom": {"n_frames": 3, "inversion_times": [100.0, 200.0]}}).phantom_config()

    def test_resolved_defaults(self):
        self.assertEqual(RpcaConfig().resolved_rank(11), 5)
        self.assertEqual(RpcaConfig(rank=2).resolved_rank(11), 2)
        self.assertEqual(PhantomConfig().resolved_inversion_times(), MOLLI_INVERSION_TIMES_MS)
        times = PhantomConfig(n_frames=3).resolved_inversion_times()
        self.assertEqual(times, [100.0, 2100.0, 4100.0])


class TestErrorsAndLogging(unittest.TestCase):

    def test_exit_codes(self):
        self.assertEqual(exit_code_for(None), 0)
        self.assertEqual(exit_code_for(ConfigError("x")), 2)
        self.assertEqual(exit_code_for(ValidationError("x")), 3)
        self.assertEqual(exit_code_for(RuntimeError("x")), 1)
        wrapped = StageError("load", ValidationError("bad"))
        self.assertEqual(wrapped.exit_code, 3)
        self.assertIn("[load]", str(wrapped))

    def test_log_level_resolution(self):
        """An explicit level wins over QMR_LOG_LEVEL, which wins over the info default."""
        with patch.dict(os.environ, {"QMR_LOG_LEVEL": "debug"}):
            self.assertEqual(resolve_level(), logging.DEBUG)
            self.assertEqual(resolve_level("warn"), logging.WARNING)
        with patch.dict(os.environ, {}, clear=True):
            with patch("qmr_motion.logging_config.load_dotenv"):
                self.assertEqual(resolve_level(), logging.INFO)
        with self.assertRaises(ValueError):
            resolve_level("loud")

    def test_setup_logging_writes_file(self):
        directory = tempfile.mkdtemp()
        try:
            log_file = os.path.join(directory, "run.log")
            setup_logging("error", log_file)
            logging.getLogger("qmr_motion.test").debug("detail for the file")
            for handler in logging.getLogger().handlers:
                handler.flush()
            with open(log_file, encoding="utf-8") as f:
                self.assertIn("detail for the file", f.read())
        finally:
            root = logging.getLogger()
            for handler in root.handlers[:]:
                handler.close()
                root.removeHandler(handler)
            shutil.rmtree(directory)


if __name__ == '__main__':
    unittest.main()
