"""
Test Suite for the command-line entry point

Runs the commands in-process on a tiny synthetic setup: supernet training,
search, evaluation, subnet training, cost reports and analysis, plus the
exit codes for configuration and infeasibility failures, the random search
strategy and routing-trace export.
"""

import sys
import os

sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), '..', 'src')))

import tempfile
from pathlib import Path

from costmodel import transformer_big_gene
from main import main
from searchspace import SearchSpace, load_gene, manual_gene, save_gene, wmt_space
from utils import (EXIT_CONFIG, EXIT_INFEASIBLE, EXIT_OK, EXIT_RUNTIME, NumericalError, exit_code_for,
                   read_jsonl, read_yaml, write_yaml)

ENV_FILE = os.path.abspath(os.path.join(os.path.dirname(__file__), '..', 'env.yaml'))


def write_tiny_env(tmp: Path) -> str:
    """env.yaml with a small space, a few steps and float64 numerics"""
    env = read_yaml(ENV_FILE)
    env['NUMERICS']['PRECISION'] = 'float64'
    env['SPACE'] = {
        'embed_dim_choices': [8, 16],
        'encoder_layer_choices': [1, 2],
        'decoder_layer_choices': [1, 2],
        'qkv_dim_choices': [8],
        'head_choices': [2],
        'arbitrary_attn_choices': [-1, 1],
        'ffn_dim_choices': [8, 16],
        'max_experts_per_layer': 2,
    }
    env['SCHEDULE'].update({'total_steps': 4, 'warmup_steps': 1, 'batch_tokens': 40, 'checkpoint_every': 0,
                            'log_every': 0})
    env['EVO'].update({'num_iterations': 2, 'num_population': 6, 'num_parents': 2, 'num_mutations': 4,
                       'num_crossover': 4, 'flops_fraction': 0.9})
    env['LATENCY'].update({'src_len': 4, 'tgt_len': 4, 'passes': 10, 'gold_passes': 10, 'warmup_passes': 1})
    env['DATA'] = {'task': 'copy', 'vocab': 10, 'length': 4, 'count': 40, 'valid_count': 8, 'seed': 1}
    env['OUTPUT'] = {'ROOT': str(tmp / 'runs')}
    return str(write_yaml(tmp / 'env.yaml', env))


def test_train_search_eval_analyze():
    """Test the commands chain through their output files"""
    print("\n[TEST 1] Train, Search, Eval, Analyze...")

    with tempfile.TemporaryDirectory() as tmp:
        tmp = Path(tmp)
        env = write_tiny_env(tmp)
        common = ['--env-file', env, '--precision', 'float64']

        assert main(['train-supernet', *common, '--out-dir', str(tmp / 'train')]) == EXIT_OK
        summary = read_yaml(tmp / 'train' / 'summary.yaml')
        assert (tmp / 'train' / 'supernet_final.yaml').exists()
        assert len(read_jsonl(tmp / 'train' / 'metrics.jsonl')) == 4
        assert 'config_hash' in read_yaml(tmp / 'train' / 'manifest.yaml')
        checkpoint = summary['checkpoint']

        assert main(['search', *common, '--supernet', checkpoint, '--out-dir', str(tmp / 'search')]) == EXIT_OK
        pareto = tmp / 'search' / 'pareto'
        assert (pareto / 'best_gene.yaml').exists()
        assert len(read_jsonl(tmp / 'search' / 'history.jsonl')) == 2
        best = str(pareto / 'best_gene.yaml')

        assert main(['eval', *common, '--gene', best, '--checkpoint', checkpoint,
                     '--out-dir', str(tmp / 'eval')]) == EXIT_OK
        score = read_yaml(tmp / 'eval' / 'summary.yaml')['score']
        assert 0.0 <= score <= 1.0

        assert main(['train-subnet', *common, '--gene', best, '--steps', '2', '--warm-start',
                     '--supernet', checkpoint, '--out-dir', str(tmp / 'subnet')]) == EXIT_OK
        assert (tmp / 'subnet' / 'subnet_final.yaml').exists()
        assert load_gene(tmp / 'subnet' / 'subnet.gene.yaml') == load_gene(best)

        assert main(['analyze', *common, '--pareto-dir', str(pareto), '--out-dir', str(tmp / 'analysis')]) == EXIT_OK
        assert (tmp / 'analysis' / 'report.txt').exists()

        # a FLOPs bound no gene can meet
        code = main(['search', *common, '--supernet', checkpoint, '--flops', '1', '--out-dir', str(tmp / 'none')])
        assert code == EXIT_INFEASIBLE

    print("[PASS] Commands chain end to end")


def test_cost_report_command():
    """Test cost reports for gene files against a reference"""
    print("\n[TEST 2] Cost Report Command...")

    with tempfile.TemporaryDirectory() as tmp:
        tmp = Path(tmp)
        env = write_tiny_env(tmp)
        searched = manual_gene(wmt_space(4), '1-1-4-4-4-1', '4-1-1-1', embed_dim=512, heads=8, width=3072)
        save_gene(tmp / 'searched.gene.yaml', searched)
        save_gene(tmp / 'big.gene.yaml', transformer_big_gene())
        config = tmp / 'run.yaml'
        config.write_text("seed: 7\n", encoding='utf-8')

        code = main(['cost-report', '--env-file', env, '--config', str(config), '--precision', 'float64',
                     '--gene', str(tmp / 'searched.gene.yaml'), '--reference', str(tmp / 'big.gene.yaml'),
                     '--src-len', '30', '--tgt-len', '30', '--out-dir', str(tmp / 'costs')])
        assert code == EXIT_OK
        assert (tmp / 'costs' / 'searched.cost.yaml').exists()
        assert (tmp / 'costs' / 'big.cost.yaml').exists()
        table = (tmp / 'costs' / 'cost_report.csv').read_text()
        assert 'flops_reduction' in table
        manifest = read_yaml(tmp / 'costs' / 'manifest.yaml')
        assert manifest['config']['EVO']['seed'] == 7
        assert manifest['config']['LATENCY']['src_len'] == 30

    print("[PASS] Cost report written")


def test_exit_codes():
    """Test configuration failures map to exit code 2 and others to their families"""
    print("\n[TEST 3] Exit Codes...")

    with tempfile.TemporaryDirectory() as tmp:
        tmp = Path(tmp)
        env = write_tiny_env(tmp)
        common = ['--env-file', env, '--precision', 'float64']
        assert main(['cost-report', *common, '--out-dir', str(tmp / 'a')]) == EXIT_CONFIG
        assert main(['cost-report', *common, '--gene', str(tmp / 'missing.gene.yaml'),
                     '--out-dir', str(tmp / 'b')]) == EXIT_CONFIG
        assert main(['analyze', *common, '--pareto-dir', str(tmp / 'nowhere'), '--out-dir', str(tmp / 'c')]) \
            == EXIT_CONFIG
        assert main(['search', *common, '--out-dir', str(tmp / 'd')]) == EXIT_CONFIG

        (tmp / 'broken.gene.yaml').write_text("embed_dim_enc: [", encoding='utf-8')
        assert main(['cost-report', *common, '--gene', str(tmp / 'broken.gene.yaml'),
                     '--out-dir', str(tmp / 'e')]) == EXIT_CONFIG

    assert exit_code_for(NumericalError("loss is nan")) == EXIT_RUNTIME

    print("[PASS] Exit codes by error family")


def test_random_search_and_routing_export():
    """Test the random strategy and routing-trace export reach their output files"""
    print("\n[TEST 4] Random Search And Routing Export...")

    with tempfile.TemporaryDirectory() as tmp:
        tmp = Path(tmp)
        env = write_tiny_env(tmp)
        common = ['--env-file', env, '--precision', 'float64']

        assert main(['train-supernet', *common, '--out-dir', str(tmp / 'train')]) == EXIT_OK
        checkpoint = read_yaml(tmp / 'train' / 'summary.yaml')['checkpoint']

        assert main(['search', *common, '--supernet', checkpoint, '--strategy', 'random', '--samples', '2',
                     '--out-dir', str(tmp / 'random')]) == EXIT_OK
        summary = read_yaml(tmp / 'random' / 'summary.yaml')
        assert summary['strategy'] == 'random'
        assert (tmp / 'random' / 'pareto' / 'best_gene.yaml').exists()
        assert not (tmp / 'random' / 'history.jsonl').exists()

        space = read_yaml(env)['SPACE']
        gene = manual_gene(SearchSpace.from_dict(space), '2-1', '2', embed_dim=16, width=16)
        save_gene(tmp / 'moe.gene.yaml', gene)
        assert main(['eval', *common, '--gene', str(tmp / 'moe.gene.yaml'), '--checkpoint', checkpoint,
                     '--routing-trace', '--out-dir', str(tmp / 'eval')]) == EXIT_OK
        summary = read_yaml(tmp / 'eval' / 'summary.yaml')
        records = read_jsonl(tmp / 'eval' / 'routing_trace.jsonl')
        assert len(records) == summary['routing_records'] > 0
        assert all(set(r) == {'token_id', 'side', 'layer', 'expert', 'gate'} for r in records)
        moe_layers = {(r['side'], r['layer']) for r in records if r['expert'] > 0}
        assert moe_layers <= {('enc', 0), ('dec', 0)}
        assert summary['architecture'] == gene.describe()

    print(f"[PASS] {len(records)} routing records exported")


if __name__ == "__main__":
    print("=" * 70)
    print("COMMAND-LINE TEST SUITE")
    print("=" * 70)

    tests = [
        test_train_search_eval_analyze,
        test_cost_report_command,
        test_exit_codes,
        test_random_search_and_routing_export,
    ]
    failed = 0
    for test in tests:
        try:
            test()
        except AssertionError as e:
            failed += 1
            print(f"[FAIL] {test.__name__}: {e}")

    print("\n" + "=" * 70)
    print(f"RESULTS: {len(tests) - failed}/{len(tests)} tests passed")
    print("=" * 70)
    sys.exit(1 if failed else 0)
