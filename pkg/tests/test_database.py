import asyncio
import csv

import pytest

from database import Database

EPOCH = {'epoch': 1, 'l_noi': 2.5, 'l_info1': 1.1, 'l_info2': 0.9, 'total': 2.9,
         'desc_clean_mean': 0.55, 'desc_noisy_mean': 0.45, 'lr': 0.05}


def run(coro):
    return asyncio.run(coro)


@pytest.fixture
def db_path(tmp_path):
    return tmp_path / 'ledger' / 'runs.db'


class TestLedger:
    def test_run_round_trip(self, db_path):
        async def scenario():
            async with Database(db_path) as db:
                run_id = await db.insert_run('noiretrieval', 0, {'m': 0.15}, sweep='modules')
                await db.set_checkpoint(run_id, 'a/checkpoint.adpt')
                await db.insert_epoch(run_id, EPOCH)
                return run_id, await db.get_runs('modules'), await db.get_epochs(run_id)

        run_id, runs, epochs = run(scenario())
        assert runs[0]['id'] == run_id
        assert runs[0]['config'] == {'m': 0.15}
        assert runs[0]['checkpoint'] == 'a/checkpoint.adpt'
        assert epochs[0]['total'] == pytest.approx(2.9)

    def test_duplicate_epoch_is_logged_not_raised(self, db_path, capsys):
        async def scenario():
            async with Database(db_path) as db:
                run_id = await db.insert_run('v', 0, {})
                first = await db.insert_epoch(run_id, EPOCH)
                second = await db.insert_epoch(run_id, EPOCH)
                return first, second

        first, second = run(scenario())
        assert first is not None and second is None
        assert '[ERROR]' in capsys.readouterr().out

    def test_evaluation_needs_existing_run(self, db_path):
        async def scenario():
            async with Database(db_path) as db:
                return await db.insert_evaluation(999, 'final', 'medium', True, 4, 0.5)

        assert run(scenario()) is None

    def test_evaluations_filtered_by_sweep_and_stage(self, db_path):
        async def scenario():
            async with Database(db_path) as db:
                a = await db.insert_run('noiretrieval', 0, {}, sweep='modules')
                b = await db.insert_run('alpha0.1_beta0.1', 0, {}, sweep='weights')
                await db.insert_evaluation(a, 'initial', 'medium', True, 4, 0.1)
                await db.insert_evaluation(a, 'final', 'medium', True, 4, 0.4)
                await db.insert_evaluation(b, 'final', 'hard', False, 4, 0.3)
                return await db.get_evaluations('modules'), await db.get_evaluations()

        modules, everything = run(scenario())
        assert [(r['variant'], r['map']) for r in modules] == [('noiretrieval', 0.4)]
        assert len(everything) == 2
        assert modules[0]['noisy'] == 1

    def test_export_csv(self, db_path, tmp_path):
        async def scenario():
            async with Database(db_path) as db:
                run_id = await db.insert_run('noiretrieval', 2, {}, sweep='modules')
                await db.insert_evaluation(run_id, 'final', 'easy', False, 4, 0.75)
                return await db.export_csv(tmp_path / 'eval.csv')

        assert run(scenario()) == 1
        with open(tmp_path / 'eval.csv', encoding='utf-8') as f:
            rows = list(csv.DictReader(f))
        assert rows[0]['variant'] == 'noiretrieval' and rows[0]['seed'] == '2'
        assert float(rows[0]['map']) == 0.75

    def test_missing_schema(self, db_path, tmp_path):
        async def scenario():
            async with Database(db_path, schema_path=tmp_path / 'nope.sql'):
                pass

        with pytest.raises(FileNotFoundError):
            run(scenario())

    def test_reopen_keeps_rows(self, db_path):
        async def write():
            async with Database(db_path) as db:
                await db.insert_run('v', 1, {})

        async def read():
            async with Database(db_path) as db:
                return await db.get_runs()

        run(write())
        assert len(run(read())) == 1
