#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <random>
#include <set>

#include "lgen/tasks/tasks.hpp"

using namespace lgen;

namespace {

// Reference rules written independently of the registry.
std::string reference(const std::string& id, const std::string& in) {
    std::string out;
    if (id == "copy") {
        return in;
    }
    if (id == "reverse") {
        for (std::size_t i = in.size(); i > 0; --i) {
            out.push_back(in[i - 1]);
        }
        return out;
    }
    if (id == "uppercase") {
        for (char c : in) {
            out.push_back(static_cast<char>(c - 'a' + 'A'));
        }
        return out;
    }
    if (id == "caesar1" || id == "caesar2") {
        const int by = id == "caesar1" ? 1 : 2;
        const std::string abc = "abcdefghijklmnopqrstuvwxyz";
        for (char c : in) {
            out.push_back(abc[(abc.find(c) + by) % 26]);
        }
        return out;
    }
    if (id == "duplicate") {
        for (char c : in) {
            out.append(2, c);
        }
        return out;
    }
    throw std::logic_error("no reference for " + id);
}

std::filesystem::path temp_file(const std::string& name) {
    return std::filesystem::temp_directory_path() / ("lgen_unit_" + name);
}

}  // namespace

TEST_SUITE("tasks") {

TEST_CASE("builtin registry") {
    const auto& all = tasks::builtin_tasks();
    REQUIRE(all.size() >= 6);
    std::set<std::string> prompts;
    for (const auto& t : all) {
        prompts.insert(t.system_prompt());
    }
    CHECK(prompts.size() == all.size());
    CHECK(tasks::tasks_in(tasks::Family::seen).size() == 4);
    CHECK(tasks::tasks_in(tasks::Family::unseen).size() == 2);
    CHECK(tasks::find_task("caesar2").family == tasks::Family::unseen);
    CHECK(tasks::find_task("duplicate").family == tasks::Family::unseen);
    CHECK_THROWS_AS(tasks::find_task("nope"), std::out_of_range);
}

TEST_CASE("rule examples") {
    CHECK(tasks::find_task("reverse").rule("abc") == "cba");
    CHECK(tasks::find_task("caesar1").rule("az") == "ba");
    CHECK(tasks::find_task("caesar2").rule("yz") == "ab");
    CHECK(tasks::find_task("uppercase").rule("abz") == "ABZ");
    CHECK(tasks::find_task("duplicate").rule("ab") == "aabb");
}

TEST_CASE("generated examples satisfy the reference rules") {
    for (const auto& t : tasks::builtin_tasks()) {
        const auto ex = tasks::make_examples(t, 300, 11);
        REQUIRE(ex.size() == 300);
        std::size_t correct = 0;
        for (const auto& e : ex) {
            CHECK(e.task_id == t.task_id);
            CHECK(e.system_prompt == t.system_prompt());
            CHECK(e.input.size() >= 4);
            CHECK(e.input.size() <= 12);
            correct += reference(t.task_id, e.input) == e.target ? 1 : 0;
        }
        CHECK(correct == ex.size());
    }
}

TEST_CASE("determinism and split hygiene") {
    const auto& rev = tasks::find_task("reverse");
    CHECK(tasks::make_examples(rev, 50, 3) == tasks::make_examples(rev, 50, 3));
    CHECK(tasks::make_examples(rev, 50, 3) != tasks::make_examples(rev, 50, 4));

    std::set<std::pair<std::string, std::string>> seen, unseen;
    for (const auto& t : tasks::builtin_tasks()) {
        for (const auto& e : tasks::make_examples(t, 200, 5)) {
            (t.family == tasks::Family::seen ? seen : unseen).insert({e.system_prompt, e.target});
        }
    }
    for (const auto& p : unseen) {
        CHECK(seen.count(p) == 0);
    }
}

TEST_CASE("few-shot formatting") {
    for (const auto& t : tasks::builtin_tasks()) {
        CHECK(tasks::format_fewshot(t, 0) == t.system_prompt());
        CHECK(tasks::format_fewshot(t, 5).size() > tasks::format_fewshot(t, 1).size());
        CHECK(tasks::format_fewshot(t, 3, 9) == tasks::format_fewshot(t, 3, 9));
        const auto p = tasks::format_fewshot(t, 2, 1);
        CHECK(p.starts_with(t.system_prompt()));
        // every shot line is a solved example
        std::size_t pos = t.system_prompt().size();
        std::size_t shots = 0;
        while (pos < p.size()) {
            const auto nl = p.find('\n', pos);
            const auto line = p.substr(pos, nl - pos);
            const auto eq = line.find('=');
            REQUIRE(eq != std::string::npos);
            CHECK(reference(t.task_id, line.substr(0, eq)) == line.substr(eq + 1));
            pos = nl + 1;
            ++shots;
        }
        CHECK(shots == 2);
    }
}

TEST_CASE("query layouts") {
    const auto q = tasks::incontext_query("Do it.\n", "abc");
    CHECK(lm::detokenize(q) == "Do it.\nabc=");
    CHECK(q.count(lm::Segment::system_prompt) == 7);
    CHECK(q.count(lm::Segment::user_input) == 4);
    const auto b = tasks::bare_query("abc");
    CHECK(b.count(lm::Segment::system_prompt) == 0);
    const auto a = tasks::answer_tokens("xy");
    CHECK(a.ids == std::vector<lm::TokenId>{'x', 'y', lm::kEndOfAnswer});
}

TEST_CASE("jsonl round trip") {
    std::vector<tasks::TaskExample> ex;
    std::mt19937_64 rng(1);
    for (int i = 0; i < 1000; ++i) {
        tasks::TaskExample e;
        e.task_id = "t" + std::to_string(rng() % 7);
        for (auto* s : {&e.system_prompt, &e.input, &e.target}) {
            const auto n = rng() % 20;
            for (std::size_t c = 0; c < n; ++c) {
                // printable ASCII plus quotes, backslashes and newlines
                *s += static_cast<char>(rng() % 3 == 0 ? "\"\\\n\t"[rng() % 4] : 32 + rng() % 95);
            }
        }
        ex.push_back(e);
    }
    const auto path = temp_file("roundtrip.jsonl");
    tasks::write_jsonl(ex, path);
    CHECK(tasks::read_jsonl(path) == ex);

    tasks::write_jsonl({}, path);
    CHECK(tasks::read_jsonl(path).empty());
    std::filesystem::remove(path);
}

TEST_CASE("jsonl errors") {
    const auto path = temp_file("bad.jsonl");
    {
        std::ofstream f(path);
        f << R"({"task_id":"copy","system_prompt":"p","input":"a","target":"a"})" << "\n";
        f << R"({"task_id":"copy","system_prompt":"p","input":"a"})" << "\n";
    }
    try {
        (void)tasks::read_jsonl(path);
        FAIL("expected an error");
    } catch (const tasks::TaskDataError& e) {
        const std::string msg = e.what();
        CHECK(msg.find(":2") != std::string::npos);
        CHECK(msg.find("target") != std::string::npos);
    }
    {
        std::ofstream f(path);
        f << "{not json\n";
    }
    CHECK_THROWS_WITH_AS((void)tasks::read_jsonl(path), doctest::Contains(":1"), tasks::TaskDataError);
    std::filesystem::remove(path);
    CHECK_THROWS_AS((void)tasks::read_jsonl(path), tasks::TaskDataError);
}

}  // TEST_SUITE
