"""
Tests for config loading, run files and logger setup
"""
import logging
import os

import pytest

from rp_utils import ConfigError, config_section, load_config, load_run_config, parse_bool, setup_logger


def test_project_config_loads():
    """The shipped config/config.yaml holds every section the lab reads"""
    config = load_config()
    for section in ('data', 'model', 'training', 'attack', 'evaluation', 'sweeps'):
        assert isinstance(config_section(config, section), dict)
    assert config['attack']['epsilon'] == 0.3
    assert config['model']['levels'] == config['attack']['levels']


def test_config_override_from_environment(tmp_path, monkeypatch):
    path = tmp_path / 'custom.yaml'
    path.write_text('model:\n  profile: paper\n')
    monkeypatch.setenv('RP_CONFIG', str(path))
    assert load_config()['model']['profile'] == 'paper'


def test_missing_config_raises(tmp_path, monkeypatch):
    monkeypatch.setenv('RP_CONFIG', str(tmp_path / 'absent.yaml'))
    with pytest.raises(FileNotFoundError):
        load_config()


def test_config_must_be_mapping(tmp_path):
    path = tmp_path / 'list.yaml'
    path.write_text('- 1\n- 2\n')
    with pytest.raises(ConfigError, match='mapping'):
        load_config(str(path))


def test_config_section_defaults_and_type():
    assert config_section({}, 'attack') == {}
    with pytest.raises(ConfigError):
        config_section({'attack': [1, 2]}, 'attack')


def test_run_file_parsing(tmp_path):
    path = tmp_path / 'run.cfg'
    path.write_text('# evaluation run\nepsilon = 0.2\n\ndata-dir = /tmp/mnist   # trailing comment\n')
    assert load_run_config(str(path), ['epsilon', 'data_dir']) == {'epsilon': '0.2', 'data_dir': '/tmp/mnist'}


@pytest.mark.parametrize("text, message", [
    ('epsilon 0.2\n', ':1: expected'),
    ('steps = 3\ngamma = 1\n', ':2: unknown key'),
    ('steps = 3\nsteps = 4\n', ':2: duplicate key'),
])
def test_run_file_errors_name_the_line(tmp_path, text, message):
    path = tmp_path / 'run.cfg'
    path.write_text(text)
    with pytest.raises(ConfigError, match=message):
        load_run_config(str(path), ['epsilon', 'steps'])


def test_unreadable_run_file(tmp_path):
    with pytest.raises(ConfigError, match='Cannot read'):
        load_run_config(str(tmp_path / 'none.cfg'), [])


@pytest.mark.parametrize("value, expected", [('1', True), ('Yes', True), ('on', True), (True, True),
                                             ('0', False), ('false', False), ('', False)])
def test_parse_bool(value, expected):
    assert parse_bool(value) is expected


def test_parse_bool_rejects_other_text():
    with pytest.raises(ConfigError):
        parse_bool('maybe')


def test_logger_writes_to_log_dir():
    logger = setup_logger('rp_test_logger', 'unit')
    assert setup_logger('rp_test_logger', 'unit') is logger
    assert len(logger.handlers) == 1
    handler = logger.handlers[0]
    assert isinstance(handler, logging.FileHandler)
    assert os.path.dirname(handler.baseFilename) == os.path.abspath(os.environ['RP_LOG_DIR'])
    assert os.path.basename(handler.baseFilename).startswith('unit_')
    logger.info("hello")
    handler.flush()
    with open(handler.baseFilename) as f:
        assert 'rp_test_logger.unit - INFO - hello' in f.read()
