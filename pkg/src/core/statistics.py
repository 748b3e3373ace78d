"""
评估结果数据库（SQLite）

每个评估回合一行；报告文件不读取这里的时间戳，数据库只用于查询与汇总。
"""
import sqlite3
from pathlib import Path
from typing import Dict, Iterable, List, Optional


class ResultsDB:
    """评估结果数据库"""

    def __init__(self, db_path="runs/results.db"):
        """初始化数据库"""
        self.db_path = str(db_path)

        # 创建数据目录
        Path(self.db_path).parent.mkdir(parents=True, exist_ok=True)

        self._init_db()

    def _connect(self) -> sqlite3.Connection:
        return sqlite3.connect(self.db_path)

    def _init_db(self):
        """初始化数据库表"""
        conn = self._connect()
        cursor = conn.cursor()

        # 回合记录表；同一 (run, arm, task, variation, repeat) 重跑时覆盖
        cursor.execute("""
            CREATE TABLE IF NOT EXISTS episodes (
                id INTEGER PRIMARY KEY AUTOINCREMENT,
                run_id TEXT NOT NULL,
                arm TEXT NOT NULL,
                task TEXT NOT NULL,
                variation INTEGER NOT NULL,
                repeat INTEGER NOT NULL,
                flaky INTEGER DEFAULT 0,
                success INTEGER DEFAULT 0,
                steps INTEGER DEFAULT 0,
                discounted_return REAL,
                created_at TIMESTAMP DEFAULT CURRENT_TIMESTAMP,
                UNIQUE(run_id, arm, task, variation, repeat)
            )
        """)

        # 运行登记表
        cursor.execute("""
            CREATE TABLE IF NOT EXISTS runs (
                run_id TEXT PRIMARY KEY,
                config_hash TEXT,
                manifest_path TEXT,
                episode_count INTEGER DEFAULT 0,
                last_update_at TIMESTAMP DEFAULT CURRENT_TIMESTAMP
            )
        """)

        cursor.execute("CREATE INDEX IF NOT EXISTS idx_episodes_run ON episodes(run_id)")
        cursor.execute("CREATE INDEX IF NOT EXISTS idx_episodes_arm_task ON episodes(arm, task)")

        conn.commit()
        conn.close()

    def register_run(self, run_id: str, config_hash: str, manifest_path: str = None):
        """登记一次运行（重复登记时更新哈希与清单路径）"""
        conn = self._connect()
        cursor = conn.cursor()
        cursor.execute("""
            INSERT INTO runs (run_id, config_hash, manifest_path, last_update_at)
            VALUES (?, ?, ?, CURRENT_TIMESTAMP)
            ON CONFLICT(run_id) DO UPDATE SET
                config_hash = excluded.config_hash,
                manifest_path = excluded.manifest_path,
                last_update_at = CURRENT_TIMESTAMP
        """, (run_id, config_hash, manifest_path))
        conn.commit()
        conn.close()

    def record_episode(self, run_id: str, arm: str, task: str, variation: int, repeat: int,
                       flaky: int, success: bool, steps: int, discounted_return: float):
        """记录一个回合"""
        conn = self._connect()
        cursor = conn.cursor()
        self._insert_episode(cursor, run_id, arm, task, variation, repeat, flaky, success, steps,
                             discounted_return)
        self._touch_run(cursor, run_id)
        conn.commit()
        conn.close()

    def record_trajectories(self, run_id: str, arm: str, task_names: Dict[int, str],
                            entries: Iterable, gamma: float = 0.9) -> int:
        """
        批量记录轨迹

        Args:
            run_id: 运行标识
            arm: 方法名（storm / reactive）
            task_names: task_id -> 任务名
            entries: (repeat, Trajectory) 序列
            gamma: 折扣回报使用的折扣因子

        Returns:
            写入的回合数
        """
        conn = self._connect()
        cursor = conn.cursor()
        count = 0
        for repeat, traj in entries:
            self._insert_episode(
                cursor, run_id, arm, task_names.get(traj.task_id, str(traj.task_id)),
                traj.variation_id, repeat, int(traj.meta.get("flaky_grasps", 0)),
                traj.success, len(traj.steps), traj.discounted_return(gamma))
            count += 1
        self._touch_run(cursor, run_id)
        conn.commit()
        conn.close()
        return count

    @staticmethod
    def _insert_episode(cursor, run_id, arm, task, variation, repeat, flaky, success, steps, discounted_return):
        cursor.execute("""
            INSERT INTO episodes
            (run_id, arm, task, variation, repeat, flaky, success, steps, discounted_return)
            VALUES (?, ?, ?, ?, ?, ?, ?, ?, ?)
            ON CONFLICT(run_id, arm, task, variation, repeat) DO UPDATE SET
                flaky = excluded.flaky,
                success = excluded.success,
                steps = excluded.steps,
                discounted_return = excluded.discounted_return,
                created_at = CURRENT_TIMESTAMP
        """, (run_id, arm, task, int(variation), int(repeat), int(flaky), 1 if success else 0,
              int(steps), float(discounted_return)))

    @staticmethod
    def _touch_run(cursor, run_id):
        cursor.execute("""
            INSERT INTO runs (run_id, episode_count, last_update_at)
            VALUES (?, (SELECT COUNT(*) FROM episodes WHERE run_id = ?), CURRENT_TIMESTAMP)
            ON CONFLICT(run_id) DO UPDATE SET
                episode_count = (SELECT COUNT(*) FROM episodes WHERE run_id = ?),
                last_update_at = CURRENT_TIMESTAMP
        """, (run_id, run_id, run_id))

    def get_success_summary(self, run_id: str = None) -> List[dict]:
        """按 方法 x 任务 汇总成功率"""
        conn = self._connect()
        cursor = conn.cursor()

        query = """
            SELECT arm, task, COUNT(*) AS episodes,
                   SUM(CASE WHEN success=1 THEN 1 ELSE 0 END) AS successes,
                   AVG(steps), AVG(discounted_return)
            FROM episodes WHERE 1=1
        """
        params = []
        if run_id:
            query += " AND run_id = ?"
            params.append(run_id)
        query += " GROUP BY arm, task ORDER BY arm, task"

        cursor.execute(query, params)
        results = cursor.fetchall()
        conn.close()

        return [
            {
                'arm': row[0],
                'task': row[1],
                'episodes': row[2],
                'successes': row[3] or 0,
                'success_rate': (row[3] or 0) / row[2] if row[2] else 0.0,
                'mean_steps': row[4],
                'mean_return': row[5],
            }
            for row in results
        ]

    def get_history(self, limit=50, offset=0, run_id=None, arm=None, task=None,
                    success: Optional[bool] = None) -> dict:
        """分页查询回合记录"""
        conn = self._connect()
        cursor = conn.cursor()

        query = "SELECT * FROM episodes WHERE 1=1"
        params = []

        if run_id:
            query += " AND run_id = ?"
            params.append(run_id)
        if arm:
            query += " AND arm = ?"
            params.append(arm)
        if task:
            query += " AND task = ?"
            params.append(task)
        if success is not None:
            query += " AND success = ?"
            params.append(1 if success else 0)

        # 总数
        count_query = query.replace("SELECT *", "SELECT COUNT(*)")
        cursor.execute(count_query, params)
        total = cursor.fetchone()[0]

        query += " ORDER BY run_id, arm, task, variation, repeat LIMIT ? OFFSET ?"
        params.extend([limit, offset])

        cursor.execute(query, params)
        results = cursor.fetchall()
        conn.close()

        return {
            'total': total,
            'records': [
                {
                    'id': row[0],
                    'run_id': row[1],
                    'arm': row[2],
                    'task': row[3],
                    'variation': row[4],
                    'repeat': row[5],
                    'flaky': row[6],
                    'success': bool(row[7]),
                    'steps': row[8],
                    'discounted_return': row[9],
                    'created_at': row[10],
                }
                for row in results
            ]
        }

    def get_runs(self) -> List[dict]:
        conn = self._connect()
        cursor = conn.cursor()
        cursor.execute("""
            SELECT run_id, config_hash, manifest_path, episode_count, last_update_at
            FROM runs ORDER BY run_id
        """)
        results = cursor.fetchall()
        conn.close()
        return [
            {
                'run_id': row[0],
                'config_hash': row[1],
                'manifest_path': row[2],
                'episode_count': row[3],
                'last_update_at': row[4],
            }
            for row in results
        ]
