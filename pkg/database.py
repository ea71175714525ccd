import csv
import io
import json
import aiofiles
import aiosqlite
from pathlib import Path
from typing import Dict, Any, List, Optional
from utils import safe_print, log


class Database:
    """Experiment ledger: training runs, their per-epoch metrics and evaluations."""

    def __init__(self, db_path: str = None, schema_path: str = None):
        if db_path is None:
            db_path = Path.cwd() / "runs" / "ledger.db"
        else:
            db_path = Path(db_path)

        if schema_path is None:
            schema_path = Path(__file__).parent / "schema.sql"
        else:
            schema_path = Path(schema_path)

        self.db_path = db_path
        self.schema_path = schema_path
        self.conn = None

        self.db_path.parent.mkdir(parents=True, exist_ok=True)

    async def connect(self):
        if self.conn is not None:
            return

        self.conn = await aiosqlite.connect(str(self.db_path))

        await self.conn.execute("PRAGMA journal_mode=WAL")
        await self.conn.execute("PRAGMA synchronous=NORMAL")
        await self.conn.execute("PRAGMA foreign_keys=ON")

        await self._initialize_schema()

        log('DEBUG', f'[Ledger] connected: {self.db_path}')

    async def close(self):
        if self.conn:
            await self.conn.close()
            self.conn = None
            log('DEBUG', '[Ledger] connection closed')

    async def __aenter__(self) -> 'Database':
        await self.connect()
        return self

    async def __aexit__(self, exc_type, exc, tb):
        await self.close()

    async def _initialize_schema(self):
        if not self.schema_path.exists():
            raise FileNotFoundError(f'Schema file not found: {self.schema_path}')

        with open(self.schema_path, 'r', encoding='utf-8') as f:
            schema_sql = f.read()

        await self.conn.executescript(schema_sql)
        await self.conn.commit()

    async def _fetch_dicts(self, sql: str, params: tuple = ()) -> List[Dict[str, Any]]:
        async with self.conn.execute(sql, params) as cursor:
            rows = await cursor.fetchall()
            columns = [description[0] for description in cursor.description]
            return [dict(zip(columns, row)) for row in rows]

    # ========== Writes ==========

    async def insert_run(self, variant: str, seed: int, config: Dict[str, Any],
                         sweep: str = None, checkpoint: str = None) -> Optional[int]:
        try:
            cursor = await self.conn.execute(
                """
                INSERT INTO runs (sweep, variant, seed, config, checkpoint)
                VALUES (?, ?, ?, ?, ?)
                """,
                (sweep, variant, int(seed), json.dumps(config, sort_keys=True), checkpoint)
            )
            await self.conn.commit()
            return cursor.lastrowid

        except Exception as e:
            safe_print(f'[ERROR] Failed to save run {variant}/{seed}: {e}')
            return None

    async def set_checkpoint(self, run_id: int, checkpoint: str) -> bool:
        try:
            await self.conn.execute("UPDATE runs SET checkpoint = ? WHERE id = ?", (checkpoint, run_id))
            await self.conn.commit()
            return True

        except Exception as e:
            safe_print(f'[ERROR] Failed to update run {run_id}: {e}')
            return False

    async def insert_epoch(self, run_id: int, row: Dict[str, float]) -> Optional[int]:
        try:
            cursor = await self.conn.execute(
                """
                INSERT INTO epochs (run_id, epoch, l_noi, l_info1, l_info2, total,
                                    desc_clean_mean, desc_noisy_mean, lr)
                VALUES (?, ?, ?, ?, ?, ?, ?, ?, ?)
                """,
                (run_id, int(row['epoch']), row['l_noi'], row['l_info1'], row['l_info2'], row['total'],
                 row['desc_clean_mean'], row['desc_noisy_mean'], row['lr'])
            )
            await self.conn.commit()
            return cursor.lastrowid

        except Exception as e:
            safe_print(f'[ERROR] Failed to save epoch {row.get("epoch")} of run {run_id}: {e}')
            return None

    async def insert_evaluation(self, run_id: int, stage: str, protocol: str, noisy: bool,
                                n_queries: int, map_value: float) -> Optional[int]:
        try:
            cursor = await self.conn.execute(
                """
                INSERT INTO evaluations (run_id, stage, protocol, noisy, n_queries, map)
                VALUES (?, ?, ?, ?, ?, ?)
                """,
                (run_id, stage, protocol, int(bool(noisy)), int(n_queries), float(map_value))
            )
            await self.conn.commit()
            return cursor.lastrowid

        except Exception as e:
            safe_print(f'[ERROR] Failed to save evaluation of run {run_id}: {e}')
            return None

    # ========== Reads ==========

    async def get_runs(self, sweep: str = None) -> List[Dict[str, Any]]:
        try:
            if sweep is None:
                rows = await self._fetch_dicts("SELECT * FROM runs ORDER BY id")
            else:
                rows = await self._fetch_dicts("SELECT * FROM runs WHERE sweep = ? ORDER BY id", (sweep,))
            for row in rows:
                row['config'] = json.loads(row['config'])
            return rows

        except Exception as e:
            safe_print(f'[ERROR] Failed to query runs: {e}')
            return []

    async def get_epochs(self, run_id: int) -> List[Dict[str, Any]]:
        try:
            return await self._fetch_dicts("SELECT * FROM epochs WHERE run_id = ? ORDER BY epoch", (run_id,))

        except Exception as e:
            safe_print(f'[ERROR] Failed to query epochs: {e}')
            return []

    async def get_evaluations(self, sweep: str = None, stage: str = 'final') -> List[Dict[str, Any]]:
        """Evaluation rows joined with their run's variant and seed."""
        sql = """
            SELECT r.sweep, r.variant, r.seed, e.run_id, e.stage, e.protocol, e.noisy, e.n_queries, e.map
            FROM evaluations e JOIN runs r ON r.id = e.run_id
            WHERE e.stage = ?
        """
        params = [stage]
        if sweep is not None:
            sql += " AND r.sweep = ?"
            params.append(sweep)
        sql += " ORDER BY r.id, e.noisy, e.protocol"
        try:
            return await self._fetch_dicts(sql, tuple(params))

        except Exception as e:
            safe_print(f'[ERROR] Failed to query evaluations: {e}')
            return []

    async def export_csv(self, out_path, sweep: str = None, stage: str = 'final') -> int:
        """Write the evaluation table to CSV; returns the number of rows written."""
        rows = await self.get_evaluations(sweep, stage)
        columns = ['sweep', 'variant', 'seed', 'run_id', 'stage', 'protocol', 'noisy', 'n_queries', 'map']
        buffer = io.StringIO()
        writer = csv.DictWriter(buffer, fieldnames=columns, lineterminator='\n')
        writer.writeheader()
        writer.writerows(rows)

        async with aiofiles.open(out_path, 'w', encoding='utf-8', newline='') as f:
            await f.write(buffer.getvalue())

        log('INFO', f'[Ledger] exported {len(rows)} evaluation rows to {out_path}')
        return len(rows)
