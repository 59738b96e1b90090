"""End-to-end CLI tests; every command runs in-process through main()."""

from __future__ import annotations

import json
from pathlib import Path

import pytest

from conftest import CountingBackend, make_document
from lumberkit.backends import MockEmbeddingBackend, ResponseCache, ScriptedBackend
from lumberkit.baselines import HYDE_PROMPT_TEMPLATE
from lumberkit.chunker import ChunkerConfig, lumberchunk, read_chunks, write_chunks
from lumberkit.cli import main
from lumberkit.corpus import QAPair, generate_qa, load_document, write_document, write_qa
from lumberkit.evaluation import evaluate
from lumberkit.index import bm25_build, embed_chunks
from lumberkit.ragpipe import answer_question

from conftest import last_id_responder


@pytest.fixture()
def book_records(tmp_path) -> Path:
    document = make_document([40] * 12, doc_id="book")
    path = tmp_path / "book.jsonl"
    write_document(document, path)
    return path


@pytest.fixture()
def qa_file(tmp_path, book_records) -> Path:
    document = load_document(book_records, "paragraph_records")
    pairs = [
        QAPair("book", "first thing?", "a1", document.paragraphs[1].text),
        QAPair("book", "second thing?", "a2", document.paragraphs[7].text),
        QAPair("book", "third thing?", "a3", document.paragraphs[10].text),
    ]
    path = tmp_path / "qa.jsonl"
    write_qa(pairs, path)
    return path


def seed_lumber_cache(records: Path, cache_path: Path, thetas=(550,)) -> None:
    """Record scripted split answers for every prompt the CLI run will issue."""
    document = load_document(records, "paragraph_records")
    cache = ResponseCache(cache_path, model_id="default")
    for theta in thetas:
        lumberchunk(
            document,
            ChunkerConfig(theta=theta),
            ScriptedBackend(last_id_responder),
            cache=cache,
        )


class TestIngest:
    def test_plain_text_round_trip(self, tmp_path, capsys):
        source = tmp_path / "book.txt"
        source.write_text("First paragraph here.\n\nSecond one.\n\nThird one.\n", encoding="utf-8")
        out = tmp_path / "records.jsonl"
        code = main(["ingest", "--input", str(source), "--doc-id", "book", "--output", str(out)])
        assert code == 0
        document = load_document(out, "paragraph_records")
        assert len(document) == 3
        assert document.doc_id == "book"
        run_config = json.loads(out.with_name("records.jsonl.run.json").read_text())
        assert run_config["command"] == "ingest"
        assert "3 paragraph record(s)" in capsys.readouterr().out

    def test_missing_input_fails_with_path(self, tmp_path, capsys):
        missing = tmp_path / "absent.txt"
        code = main(["ingest", "--input", str(missing), "--output", str(tmp_path / "o.jsonl")])
        assert code == 1
        err = capsys.readouterr().err
        assert err.startswith("error:")
        assert "absent.txt" in err


class TestChunkCommand:
    def test_paragraph_method(self, tmp_path, book_records, capsys):
        out_dir = tmp_path / "para"
        code = main(
            [
                "chunk",
                "--document",
                str(book_records),
                "--method",
                "paragraph",
                "--output-dir",
                str(out_dir),
            ]
        )
        assert code == 0
        chunks = read_chunks(out_dir / "chunks.jsonl")
        assert len(chunks) == 12
        stats = json.loads((out_dir / "stats.json").read_text())
        assert stats["count"] == 12
        assert stats["mean_tokens"] == pytest.approx(54.0)  # 40 words -> 54 tokens
        timing = json.loads((out_dir / "timing.json").read_text())
        assert timing["seconds"] >= 0.0
        run_config = json.loads((out_dir / "run_config.json").read_text())
        assert run_config["chunker"] == {"method": "paragraph"}
        assert "12 chunk(s)" in capsys.readouterr().out

    def test_deterministic_outputs_across_runs(self, tmp_path, book_records):
        dirs = [tmp_path / "a", tmp_path / "b"]
        for out_dir in dirs:
            assert (
                main(
                    [
                        "chunk",
                        "--document",
                        str(book_records),
                        "--method",
                        "paragraph",
                        "--output-dir",
                        str(out_dir),
                    ]
                )
                == 0
            )
        assert (dirs[0] / "chunks.jsonl").read_bytes() == (dirs[1] / "chunks.jsonl").read_bytes()
        assert (dirs[0] / "stats.json").read_bytes() == (dirs[1] / "stats.json").read_bytes()

    def test_recursive_method_respects_cap(self, tmp_path, book_records):
        out_dir = tmp_path / "rec"
        code = main(
            [
                "chunk",
                "--document",
                str(book_records),
                "--method",
                "recursive",
                "--max-tokens",
                "100",
                "--output-dir",
                str(out_dir),
            ]
        )
        assert code == 0
        chunks = read_chunks(out_dir / "chunks.jsonl")
        assert all(c.token_count <= 100 for c in chunks)
        document = load_document(book_records, "paragraph_records")
        assert "".join(c.text for c in chunks) == document.text

    def test_semantic_method_with_mock_embedder(self, tmp_path, book_records):
        out_dir = tmp_path / "sem"
        code = main(
            [
                "chunk",
                "--document",
                str(book_records),
                "--method",
                "semantic",
                "--percentile",
                "80",
                "--output-dir",
                str(out_dir),
            ]
        )
        assert code == 0
        chunks = read_chunks(out_dir / "chunks.jsonl")
        assert chunks[0].start_para == 1
        assert chunks[-1].end_para == 12
        for left, right in zip(chunks, chunks[1:]):
            assert right.start_para == left.end_para + 1

    def test_lumber_replays_from_cache_byte_identically(self, tmp_path, book_records):
        cache_path = tmp_path / "splits.jsonl"
        seed_lumber_cache(book_records, cache_path)
        dirs = [tmp_path / "l1", tmp_path / "l2"]
        for out_dir in dirs:
            code = main(
                [
                    "chunk",
                    "--document",
                    str(book_records),
                    "--method",
                    "lumber",
                    "--replay-cache",
                    str(cache_path),
                    "--output-dir",
                    str(out_dir),
                ]
            )
            assert code == 0
        assert (dirs[0] / "chunks.jsonl").read_bytes() == (dirs[1] / "chunks.jsonl").read_bytes()
        document = load_document(book_records, "paragraph_records")
        direct = lumberchunk(document, ChunkerConfig(), ScriptedBackend(last_id_responder))
        assert read_chunks(dirs[0] / "chunks.jsonl") == direct
        run_config = json.loads((dirs[0] / "run_config.json").read_text())
        assert run_config["backend"]["kind"] == "replay"
        assert run_config["chunker"]["theta"] == 550

    def test_lumber_without_backend_fails_fast(self, tmp_path, book_records, capsys):
        code = main(
            [
                "chunk",
                "--document",
                str(book_records),
                "--method",
                "lumber",
                "--output-dir",
                str(tmp_path / "x"),
            ]
        )
        assert code == 1
        err = capsys.readouterr().err
        assert "--replay-cache" in err
        assert "--backend-url" in err

    def test_malformed_records_fail_with_line_number(self, tmp_path, capsys):
        bad = tmp_path / "bad.jsonl"
        bad.write_text('{"doc_id": "d", "index": 1, "text": "ok"}\nnot json\n', encoding="utf-8")
        code = main(
            ["chunk", "--document", str(bad), "--method", "paragraph", "--output-dir", str(tmp_path / "o")]
        )
        assert code == 1
        assert "line 2" in capsys.readouterr().err


class TestEvalCommand:
    def make_chunk_files(self, tmp_path, book_records) -> list[Path]:
        document = load_document(book_records, "paragraph_records")
        para_path = tmp_path / "paragraph.jsonl"
        lumber_path = tmp_path / "lumber.jsonl"
        from lumberkit.baselines import paragraph_chunks

        write_chunks(paragraph_chunks(document), para_path)
        write_chunks(
            lumberchunk(document, ChunkerConfig(theta=200), ScriptedBackend(last_id_responder)),
            lumber_path,
        )
        return [para_path, lumber_path]

    def test_two_chunk_files_two_rows(self, tmp_path, book_records, qa_file, capsys):
        chunk_files = self.make_chunk_files(tmp_path, book_records)
        out_dir = tmp_path / "eval"
        code = main(
            [
                "eval",
                "--chunks",
                *[str(p) for p in chunk_files],
                "--qa",
                str(qa_file),
                "--ks",
                "1",
                "5",
                "--output-dir",
                str(out_dir),
            ]
        )
        assert code == 0
        stdout = capsys.readouterr().out
        assert "paragraph" in stdout and "lumber" in stdout
        assert "DCG@1" in stdout and "Recall@5" in stdout
        report_text = (out_dir / "report.txt").read_text(encoding="utf-8")
        assert report_text.rstrip("\n") in stdout
        rows = [json.loads(line) for line in (out_dir / "reports.jsonl").read_text().splitlines()]
        assert [row["method"] for row in rows] == ["paragraph", "lumber"]
        assert all(row["ks"] == [1, 5] for row in rows)
        run_config = json.loads((out_dir / "run_config.json").read_text())
        assert run_config["ks"] == [1, 5]
        assert run_config["command"] == "eval"

    def test_matches_library_evaluation(self, tmp_path, book_records, qa_file):
        chunk_files = self.make_chunk_files(tmp_path, book_records)
        out_dir = tmp_path / "eval"
        main(
            [
                "eval",
                "--chunks",
                str(chunk_files[0]),
                "--qa",
                str(qa_file),
                "--output-dir",
                str(out_dir),
            ]
        )
        row = json.loads((out_dir / "reports.jsonl").read_text().splitlines()[0])
        document = load_document(book_records, "paragraph_records")
        from lumberkit.baselines import paragraph_chunks
        from lumberkit.corpus import load_qa

        expected = evaluate(
            paragraph_chunks(document),
            load_qa(qa_file),
            MockEmbeddingBackend(dimension=64, seed=0),
        )
        assert row["dcg"]["1"] == pytest.approx(expected.dcg[1])
        assert row["recall"]["20"] == pytest.approx(expected.recall[20])

    def test_hyde_label_and_replay(self, tmp_path, book_records, qa_file, capsys):
        chunk_files = self.make_chunk_files(tmp_path, book_records)
        document = load_document(book_records, "paragraph_records")
        cache = ResponseCache(tmp_path / "hyde.jsonl", model_id="default")
        from lumberkit.corpus import load_qa

        for pair in load_qa(qa_file):
            prompt = HYDE_PROMPT_TEMPLATE.format(query=pair.question)
            cache.put(prompt, document.paragraphs[1].text)
        out_dir = tmp_path / "hyde-eval"
        code = main(
            [
                "eval",
                "--chunks",
                str(chunk_files[0]),
                "--qa",
                str(qa_file),
                "--hyde",
                "--replay-cache",
                str(tmp_path / "hyde.jsonl"),
                "--output-dir",
                str(out_dir),
            ]
        )
        assert code == 0
        assert "paragraph+hyde" in capsys.readouterr().out

    def test_hyde_without_backend_fails(self, tmp_path, book_records, qa_file, capsys):
        chunk_files = self.make_chunk_files(tmp_path, book_records)
        code = main(
            [
                "eval",
                "--chunks",
                str(chunk_files[0]),
                "--qa",
                str(qa_file),
                "--hyde",
                "--output-dir",
                str(tmp_path / "x"),
            ]
        )
        assert code == 1
        assert "--hyde needs a completion backend" in capsys.readouterr().err


class TestSweepCommand:
    def test_single_theta_equals_chunk_plus_eval(self, tmp_path, book_records, qa_file):
        cache_path = tmp_path / "splits.jsonl"
        seed_lumber_cache(book_records, cache_path, thetas=(550,))
        out_dir = tmp_path / "sweep"
        code = main(
            [
                "sweep",
                "--documents",
                str(book_records),
                "--qa",
                str(qa_file),
                "--thetas",
                "550",
                "--replay-cache",
                str(cache_path),
                "--output-dir",
                str(out_dir),
            ]
        )
        assert code == 0
        rows = [json.loads(line) for line in (out_dir / "reports.jsonl").read_text().splitlines()]
        assert len(rows) == 1
        assert rows[0]["theta"] == 550
        assert rows[0]["method"] == "lumberchunker(θ=550)"
        document = load_document(book_records, "paragraph_records")
        chunks = lumberchunk(document, ChunkerConfig(theta=550), ScriptedBackend(last_id_responder))
        from lumberkit.corpus import load_qa

        expected = evaluate(chunks, load_qa(qa_file), MockEmbeddingBackend(dimension=64, seed=0))
        assert rows[0]["dcg"] == {str(k): pytest.approx(v) for k, v in expected.dcg.items()}
        assert rows[0]["recall"] == {str(k): pytest.approx(v) for k, v in expected.recall.items()}

    def test_thetas_sorted_ascending(self, tmp_path, book_records, qa_file):
        cache_path = tmp_path / "splits.jsonl"
        seed_lumber_cache(book_records, cache_path, thetas=(450, 650))
        out_dir = tmp_path / "sweep"
        code = main(
            [
                "sweep",
                "--documents",
                str(book_records),
                "--qa",
                str(qa_file),
                "--thetas",
                "650",
                "450",
                "--replay-cache",
                str(cache_path),
                "--output-dir",
                str(out_dir),
            ]
        )
        assert code == 0
        rows = [json.loads(line) for line in (out_dir / "reports.jsonl").read_text().splitlines()]
        assert [row["theta"] for row in rows] == [450, 650]

    def test_sweep_without_backend_fails(self, tmp_path, book_records, qa_file, capsys):
        code = main(
            [
                "sweep",
                "--documents",
                str(book_records),
                "--qa",
                str(qa_file),
                "--output-dir",
                str(tmp_path / "x"),
            ]
        )
        assert code == 1
        assert "sweep needs a completion backend" in capsys.readouterr().err


def seed_rag_cache(chunks, qa_pairs, cache_path: Path) -> None:
    """Record pipeline responses by dry-running each question in-process."""
    embedder = MockEmbeddingBackend(dimension=64, seed=0)
    vector_index = embed_chunks(chunks, embedder)
    bm25_index = bm25_build(chunks)

    def respond(prompt: str) -> str:
        if "Order the numbered documents" in prompt:
            return "2, 1, 3"
        return "A recorded answer."

    backend = CountingBackend(respond)
    for pair in qa_pairs:
        answer_question(pair.question, bm25_index, vector_index, embedder, backend)
    cache = ResponseCache(cache_path, model_id="default")
    for prompt in backend.prompts:
        cache.put(prompt, respond(prompt))


class TestRagCommand:
    @pytest.fixture()
    def rag_inputs(self, tmp_path, book_records):
        document = load_document(book_records, "paragraph_records")
        chunks = lumberchunk(
            document, ChunkerConfig(theta=200), ScriptedBackend(last_id_responder)
        )
        chunk_path = tmp_path / "chunks.jsonl"
        write_chunks(chunks, chunk_path)
        qa_pairs = [
            QAPair("book", "What did Joshua Haldeman study?", "chiropractic", "p1"),
            QAPair("book", "what happened next?", "nothing", "p2"),
        ]
        qa_path = tmp_path / "questions.jsonl"
        write_qa(qa_pairs, qa_path)
        cache_path = tmp_path / "rag-cache.jsonl"
        seed_rag_cache(chunks, qa_pairs, cache_path)
        return chunk_path, qa_path, cache_path

    def run_rag(self, rag_inputs, out_dir, command="rag"):
        chunk_path, qa_path, cache_path = rag_inputs
        return main(
            [
                command,
                "--chunks",
                str(chunk_path),
                "--questions",
                str(qa_path),
                "--replay-cache",
                str(cache_path),
                "--output-dir",
                str(out_dir),
            ]
        )

    def test_records_and_summary(self, tmp_path, rag_inputs, capsys):
        out_dir = tmp_path / "rag-out"
        assert self.run_rag(rag_inputs, out_dir) == 0
        records = [
            json.loads(line) for line in (out_dir / "answers.jsonl").read_text().splitlines()
        ]
        assert len(records) == 2
        assert records[0]["question"] == "What did Joshua Haldeman study?"
        assert records[0]["mentions"] == ["Joshua Haldeman"]
        assert records[0]["bm25_k"] == 3
        assert records[1]["bm25_k"] == 1
        assert all(record["answer"] == "A recorded answer." for record in records)
        assert all(len(record["retrieved"]) >= 1 for record in records)
        summary = json.loads((out_dir / "summary.json").read_text())
        assert summary["questions"] == 2
        assert 0.0 <= summary["qa_accuracy"] <= 100.0
        assert "qa_accuracy" in capsys.readouterr().out

    def test_byte_identical_across_runs(self, tmp_path, rag_inputs):
        dirs = [tmp_path / "r1", tmp_path / "r2"]
        for out_dir in dirs:
            assert self.run_rag(rag_inputs, out_dir) == 0
        for name in ("answers.jsonl", "summary.json"):
            assert (dirs[0] / name).read_bytes() == (dirs[1] / name).read_bytes()

    def test_rag_answer_alias(self, tmp_path, rag_inputs):
        assert self.run_rag(rag_inputs, tmp_path / "alias-out", command="rag-answer") == 0


class TestGenQaCommand:
    def test_replayed_generation(self, tmp_path, book_records):
        document = load_document(book_records, "paragraph_records")

        def respond(prompt: str) -> str:
            excerpt = prompt.rsplit("Passage:", 1)[1].strip()
            supporting = " ".join(excerpt.split()[:10])
            return (
                "Question: What does the excerpt mention first?\n"
                f"Answer: It mentions {excerpt.split()[0]}.\n"
                f"Supporting Passage: {supporting}\n"
            )

        recorder = CountingBackend(respond)
        direct = generate_qa(document, recorder, 3, seed=11)
        cache = ResponseCache(tmp_path / "qa-cache.jsonl", model_id="default")
        for prompt in recorder.prompts:
            cache.put(prompt, respond(prompt))

        out = tmp_path / "generated.jsonl"
        code = main(
            [
                "gen-qa",
                "--document",
                str(book_records),
                "-n",
                "3",
                "--seed",
                "11",
                "--replay-cache",
                str(tmp_path / "qa-cache.jsonl"),
                "--output",
                str(out),
            ]
        )
        assert code == 0
        from lumberkit.corpus import load_qa

        loaded = load_qa(out)
        assert loaded == direct
        assert len(loaded) == 3
        run_config = json.loads(out.with_name("generated.jsonl.run.json").read_text())
        assert run_config["seed"] == 11
        assert run_config["inputs"]["n"] == 3

    def test_zero_samples(self, tmp_path, book_records, capsys):
        empty_cache = tmp_path / "empty.jsonl"
        empty_cache.write_text("", encoding="utf-8")
        out = tmp_path / "none.jsonl"
        code = main(
            [
                "gen-qa",
                "--document",
                str(book_records),
                "-n",
                "0",
                "--replay-cache",
                str(empty_cache),
                "--output",
                str(out),
            ]
        )
        assert code == 0
        assert "wrote 0 QA pair(s)" in capsys.readouterr().out
        assert out.read_text(encoding="utf-8") == ""
