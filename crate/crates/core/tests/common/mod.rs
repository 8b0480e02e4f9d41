#![allow(dead_code)]

use std::path::{Path, PathBuf};

use raise_core::backend::TapeEntry;
use raise_core::model::{Difficulty, Question};
use rusqlite::Connection;

pub fn pets_db(path: &Path) {
    let conn = Connection::open(path).unwrap();
    conn.execute_batch(
        "CREATE TABLE owner (id INTEGER PRIMARY KEY, name TEXT NOT NULL, city TEXT);
         CREATE TABLE pet (id INTEGER PRIMARY KEY, name TEXT, species TEXT, age INTEGER,
                           owner_id INTEGER REFERENCES owner(id));
         INSERT INTO owner VALUES (1, 'Ana', 'Lisbon'), (2, 'Ben', 'Porto'), (3, 'Caro', 'Lisbon');
         INSERT INTO pet VALUES (1, 'Rex', 'dog', 3, 1), (2, 'Tom', 'cat', 5, 1),
                                (3, 'Kiwi', 'bird', 1, 2), (4, 'Fido', 'dog', 7, 3);",
    )
    .unwrap();
}

pub fn shop_db(path: &Path) {
    let conn = Connection::open(path).unwrap();
    conn.execute_batch(
        "CREATE TABLE product (id INTEGER PRIMARY KEY, name TEXT, price REAL, category TEXT);
         CREATE TABLE sale (id INTEGER PRIMARY KEY, product_id INTEGER REFERENCES product(id),
                            qty INTEGER, day TEXT);
         INSERT INTO product VALUES (1, 'lamp', 19.99, 'home'), (2, 'mug', 4.5, 'kitchen'),
                                    (3, 'pan', 25.0, 'kitchen'), (4, 'rug', 80.0, 'home');
         INSERT INTO sale VALUES (1, 1, 2, '2024-01-01'), (2, 2, 5, '2024-01-01'),
                                 (3, 2, 1, '2024-01-02'), (4, 3, 1, '2024-01-03');",
    )
    .unwrap();
}

pub struct FixtureQuestion {
    pub id: u32,
    pub db: &'static str,
    pub difficulty: &'static str,
    pub text: &'static str,
    /// Gold select-list and the rest of the gold statement.
    pub list: &'static str,
    pub rest: &'static str,
    /// A wrong first-round answer; `None` means round one is already right.
    pub wrong: Option<&'static str>,
    pub table: &'static str,
}

impl FixtureQuestion {
    pub fn gold(&self) -> String {
        format!("SELECT {} {}", self.list, self.rest)
    }

    /// Gold with an extra trailing column, repaired by the column rewrite.
    pub fn widened(&self) -> String {
        format!("SELECT {}, 1 AS extra {}", self.list, self.rest)
    }
}

pub const QUESTIONS: [FixtureQuestion; 10] = [
    FixtureQuestion { id: 0, db: "pets", difficulty: "simple", text: "How many pets are there?", list: "COUNT(*)", rest: "FROM pet", wrong: None, table: "pet" },
    FixtureQuestion { id: 1, db: "pets", difficulty: "simple", text: "List the names of dogs.", list: "name", rest: "FROM pet WHERE species = 'dog'", wrong: Some("SELECT name FROM pet"), table: "pet" },
    FixtureQuestion { id: 2, db: "pets", difficulty: "moderate", text: "Which owner has the most pets?", list: "o.name", rest: "FROM owner o JOIN pet p ON p.owner_id = o.id GROUP BY o.id ORDER BY COUNT(*) DESC LIMIT 1", wrong: Some("SELECT name FROM owner LIMIT 2"), table: "owner" },
    FixtureQuestion { id: 3, db: "pets", difficulty: "moderate", text: "How many pets live in Lisbon?", list: "COUNT(*)", rest: "FROM pet p JOIN owner o ON p.owner_id = o.id WHERE o.city = 'Lisbon'", wrong: None, table: "owner" },
    FixtureQuestion { id: 4, db: "pets", difficulty: "challenging", text: "What is the average age of cats and dogs?", list: "AVG(age)", rest: "FROM pet WHERE species IN ('cat', 'dog')", wrong: Some("SELECT AVG(age) FROM pet"), table: "pet" },
    FixtureQuestion { id: 5, db: "shop", difficulty: "simple", text: "How many products are there?", list: "COUNT(*)", rest: "FROM product", wrong: None, table: "product" },
    FixtureQuestion { id: 6, db: "shop", difficulty: "simple", text: "What is the most expensive product?", list: "name", rest: "FROM product ORDER BY price DESC LIMIT 1", wrong: Some("SELECT name FROM product ORDER BY price LIMIT 1"), table: "product" },
    FixtureQuestion { id: 7, db: "shop", difficulty: "moderate", text: "What quantity was sold per category?", list: "p.category, SUM(s.qty)", rest: "FROM sale s JOIN product p ON s.product_id = p.id GROUP BY p.category", wrong: None, table: "sale" },
    FixtureQuestion { id: 8, db: "shop", difficulty: "moderate", text: "Which product was never sold?", list: "name", rest: "FROM product WHERE id NOT IN (SELECT product_id FROM sale)", wrong: Some("SELECT name FROM product WHERE id = 1"), table: "product" },
    FixtureQuestion { id: 9, db: "shop", difficulty: "challenging", text: "What was the revenue on each day?", list: "s.day, SUM(s.qty * p.price)", rest: "FROM sale s JOIN product p ON s.product_id = p.id GROUP BY s.day", wrong: None, table: "sale" },
];

pub fn fixture_questions() -> Vec<Question> {
    QUESTIONS
        .iter()
        .map(|q| Question {
            id: q.id.to_string(),
            db_id: q.db.into(),
            text: q.text.into(),
            evidence: String::new(),
            gold_sql: Some(q.gold()),
            difficulty: Difficulty::from_label(q.difficulty),
        })
        .collect()
}

const PET_DOCS: &str = "original_column_name,column_name,column_description,data_format,value_description\n\
id,pet id,unique pet identifier,integer,\n\
species,species,kind of animal,text,\"dog, cat or bird\"\n\
owner_id,owner,the owner of the pet,integer,refers to owner.id\n";

/// Writes a miniature benchmark layout. Only `pets` has documentation.
pub fn bird_layout(root: &Path) {
    let dbs = root.join("dev_databases");
    for (db, build) in [("pets", pets_db as fn(&Path)), ("shop", shop_db)] {
        let dir = dbs.join(db);
        std::fs::create_dir_all(&dir).unwrap();
        build(&dir.join(format!("{db}.sqlite")));
    }
    let docs = dbs.join("pets").join("database_description");
    std::fs::create_dir_all(&docs).unwrap();
    std::fs::write(docs.join("pet.csv"), PET_DOCS).unwrap();
    let records: Vec<serde_json::Value> = QUESTIONS
        .iter()
        .map(|q| {
            serde_json::json!({
                "question_id": q.id,
                "db_id": q.db,
                "question": q.text,
                "evidence": "",
                "SQL": q.gold(),
                "difficulty": q.difficulty,
            })
        })
        .collect();
    std::fs::write(root.join("dev.json"), serde_json::to_string_pretty(&records).unwrap()).unwrap();
}

/// Explorer tape: three tool calls per question, then a final answer. Entries
/// are keyed on the question text so workers may run in any order.
pub fn explorer_tape() -> Vec<TapeEntry> {
    let mut tape = Vec::new();
    for q in &QUESTIONS {
        let turns = [
            "I should see which tables exist.\n[RUN] read_table_names() [EXECUTE]".to_string(),
            format!("The {t} table looks relevant.\n[RUN] read_table_columns({t}) [EXECUTE]", t = q.table),
            format!("Let me check the data.\n[RUN] run_query(SELECT * FROM {} LIMIT 3) [EXECUTE]", q.table),
            format!("That is enough.\n```sql\n{}\n```", q.gold()),
        ];
        for t in turns {
            tape.push(TapeEntry::matching(q.text, t));
        }
    }
    tape
}

/// First generator: wrong in round one for some questions, right in round two.
pub fn generator_a_tape() -> Vec<TapeEntry> {
    let mut tape = Vec::new();
    for q in &QUESTIONS {
        let first = q.wrong.map(String::from).unwrap_or_else(|| q.gold());
        tape.push(TapeEntry::matching(q.text, format!("```sql\n{first}\n```")));
        tape.push(TapeEntry::matching(q.text, format!("```sql\n{}\n```", q.gold())));
    }
    tape
}

/// Second generator always adds a column.
pub fn generator_b_tape() -> Vec<TapeEntry> {
    QUESTIONS
        .iter()
        .map(|q| TapeEntry::repeating(q.text, format!("```sql\n{}\n```", q.widened())))
        .collect()
}

/// Post-processor: names the gold columns.
pub fn postprocessor_tape() -> Vec<TapeEntry> {
    QUESTIONS
        .iter()
        .map(|q| TapeEntry::repeating(q.text, serde_json::to_string(&vec![q.list]).unwrap()))
        .collect()
}

pub fn write_tape(path: &Path, tape: &[TapeEntry]) {
    std::fs::write(path, serde_json::to_string_pretty(tape).unwrap()).unwrap();
}

/// Layout, tapes and a config file in `root`; returns the config path.
pub fn pipeline_fixture(root: &Path) -> PathBuf {
    let data = root.join("bird");
    std::fs::create_dir_all(&data).unwrap();
    bird_layout(&data);
    let tapes = root.join("tapes");
    std::fs::create_dir_all(&tapes).unwrap();
    write_tape(&tapes.join("explorer.json"), &explorer_tape());
    write_tape(&tapes.join("gen_a.json"), &generator_a_tape());
    write_tape(&tapes.join("gen_b.json"), &generator_b_tape());
    write_tape(&tapes.join("columns.json"), &postprocessor_tape());
    let config = root.join("raise.toml");
    std::fs::write(
        &config,
        r#"dataset = "bird"
store = "runs"
seed = 11
sample_fraction = 1.0
rounds = 2
k = 40

[roles]
explorer = "explorer"
generators = ["gen_a", "gen_b"]
postprocess = ["gen_b"]
postprocessor = "columns"

[backends.explorer]
kind = "scripted"
tape = "tapes/explorer.json"

[backends.gen_a]
kind = "scripted"
tape = "tapes/gen_a.json"

[backends.gen_b]
kind = "scripted"
tape = "tapes/gen_b.json"

[backends.columns]
kind = "scripted"
tape = "tapes/columns.json"
"#,
    )
    .unwrap();
    config
}

/// Every file under `dir` with its bytes, sorted by relative path.
pub fn snapshot(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    if !dir.exists() {
        return out;
    }
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().to_path_buf(), std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

pub fn run_cli(args: &[&str]) -> (i32, String, String) {
    let mut out = Vec::new();
    let mut err = Vec::new();
    let argv = std::iter::once("raise").chain(args.iter().copied());
    let code = raise_core::cli::dispatch_to(argv, &mut out, &mut err);
    (code, String::from_utf8(out).unwrap(), String::from_utf8(err).unwrap())
}
