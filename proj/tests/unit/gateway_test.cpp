#include <gtest/gtest.h>
#include <httplib.h>

#include <deque>
#include <thread>

#include "keycomp/digest.hpp"
#include "keycomp/error.hpp"
#include "keycomp/gateway.hpp"
#include "support/fixtures.hpp"

using namespace keycomp;
using keycomp::testing::TempDir;
using keycomp::testing::write_text;
using json = nlohmann::json;

namespace {

// Replays a fixed list of outcomes: an HTTP status (200 answers "ok") or -1 for a connection failure.
class ScriptedStatus final : public Transport {
 public:
  explicit ScriptedStatus(std::deque<int> statuses, std::string error_body = "{}")
      : statuses_(std::move(statuses)), error_body_(std::move(error_body)) {}
  HttpResponse post(const HttpRequest& request) override {
    last = request;
    ++calls;
    const int s = statuses_.empty() ? 200 : statuses_.front();
    if (!statuses_.empty()) statuses_.pop_front();
    if (s < 0) throw TransportError("connection refused");
    HttpResponse r;
    r.status = s;
    r.body = s == 200 ? make_chat_response("m", "ok") : error_body_;
    return r;
  }
  int calls = 0;
  HttpRequest last;

 private:
  std::deque<int> statuses_;
  std::string error_body_;
};

EndpointConfig llm_endpoint(int retries = 3) {
  EndpointConfig e = EndpointConfig::for_role(Role::LLM);
  e.type = EndpointType::MockRule;
  e.model_name = "rule";
  e.max_retries = retries;
  return e;
}

EndpointConfig vlm_endpoint() {
  EndpointConfig e = EndpointConfig::for_role(Role::VLM);
  e.type = EndpointType::MockEcho;
  e.model_name = "echo";
  return e;
}

PromptInstance prompt(std::string text) { return {"t", std::move(text), {}}; }

ModelTranscript sample_transcript(const std::string& key) {
  ModelTranscript t;
  t.key = key;
  t.model = "m";
  t.request_prompt = "p";
  t.response_text = "r";
  t.recorded_at = "2024-01-01T00:00:00Z";
  return t;
}

}  // namespace

TEST(TranscriptKey, PureAndSensitive) {
  const SamplingParams p;
  const std::optional<std::string> img = sha256_hex("image");
  const auto base = transcript_key(Role::VLM, "m", "prompt", img, p);
  EXPECT_EQ(base, transcript_key(Role::VLM, "m", "prompt", img, p));
  EXPECT_EQ(base.size(), 64u);
  EXPECT_NE(base, transcript_key(Role::VLM, "m", "prompt!", img, p));
  EXPECT_NE(base, transcript_key(Role::VLM, "m", "prompt", sha256_hex("other"), p));
  EXPECT_NE(base, transcript_key(Role::VLM, "m", "prompt", std::nullopt, p));
  EXPECT_NE(base, transcript_key(Role::VLM, "m2", "prompt", img, p));
  EXPECT_NE(base, transcript_key(Role::LLM, "m", "prompt", img, p));
  SamplingParams q = p;
  q.temperature = 0.0;
  EXPECT_NE(base, transcript_key(Role::VLM, "m", "prompt", img, q));
  q = p;
  q.sample_index = 1;
  EXPECT_NE(base, transcript_key(Role::VLM, "m", "prompt", img, q));
  q = p;
  q.num_beams = 10;
  EXPECT_NE(base, transcript_key(Role::VLM, "m", "prompt", img, q));
}

TEST(ChatRequest, WireFormat) {
  const std::vector<ImagePayload> images{{"\x89PNG", "image/png"}};
  SamplingParams p;
  p.num_beams = 10;
  const auto req = json::parse(build_chat_request(Role::VLM, "mini", "describe", images, p));
  EXPECT_EQ(req["model"], "mini");
  EXPECT_EQ(req["num_beams"], 10);
  EXPECT_EQ(req["temperature"], 1.0);
  const auto& content = req["messages"][0]["content"];
  EXPECT_EQ(content[0]["text"], "describe");
  EXPECT_EQ(content[1]["image_url"]["url"], "data:image/png;base64," + base64_encode("\x89PNG"));

  const auto view = parse_chat_request(req.dump());
  EXPECT_EQ(view.prompt, "describe");
  EXPECT_EQ(view.images, std::vector<std::string>{"\x89PNG"});

  const auto plain = json::parse(build_chat_request(Role::LLM, "gpt", "hi", {}, SamplingParams{}));
  EXPECT_EQ(plain["messages"][0]["content"], "hi");
  EXPECT_FALSE(plain.contains("num_beams"));
}

TEST(ChatResponse, Parse) {
  const auto r = parse_chat_response(make_chat_response("m", "two words"));
  EXPECT_EQ(r.text, "two words");
  EXPECT_EQ(r.usage.completion_tokens, 2);
  EXPECT_THROW(parse_chat_response("nope"), ModelError);
  EXPECT_THROW(parse_chat_response(R"({"choices": []})"), ModelError);
  EXPECT_THROW(parse_chat_response(make_chat_response("m", "  ")), ModelError);
}

TEST(ChatClient, RetriesAreBoundedWithNonDecreasingDelays) {
  for (int retries : {0, 1, 3, 6}) {
    auto t = std::make_shared<ScriptedStatus>(std::deque<int>(20, 503));
    std::vector<std::chrono::milliseconds> delays;
    ChatClient client(llm_endpoint(retries), t, [&](std::chrono::milliseconds d) { delays.push_back(d); });
    try {
      client.send("x", {}, SamplingParams{});
      FAIL();
    } catch (const TransportError& e) {
      EXPECT_EQ(e.status(), 503);
    }
    EXPECT_EQ(t->calls, retries + 1);
    ASSERT_EQ(delays.size(), static_cast<std::size_t>(retries));
    for (std::size_t i = 1; i < delays.size(); ++i) EXPECT_GE(delays[i], delays[i - 1]);
  }
}

TEST(ChatClient, BackoffIsCapped) {
  RetryPolicy p;
  for (int i = 0; i < 40; ++i) {
    EXPECT_LE(p.delay(i), p.max_backoff);
    EXPECT_GE(p.delay(i + 1), p.delay(i));
  }
  EXPECT_EQ(p.delay(0), std::chrono::milliseconds(500));
}

TEST(ChatClient, RecoversFromTransientFailures) {
  auto t = std::make_shared<ScriptedStatus>(std::deque<int>{-1, 429, 200});
  ChatClient client(llm_endpoint(), t, [](auto) {});
  EXPECT_EQ(client.send("x", {}, SamplingParams{}).text, "ok");
  EXPECT_EQ(t->calls, 3);
}

TEST(ChatClient, ClientErrorsAreNotRetried) {
  auto t = std::make_shared<ScriptedStatus>(std::deque<int>{401, 200});
  ChatClient client(llm_endpoint(), t, [](auto) {});
  EXPECT_THROW(client.send("x", {}, SamplingParams{}), ModelError);
  EXPECT_EQ(t->calls, 1);
}

TEST(ChatClient, ContextOverflowReportsPromptLength) {
  auto t = std::make_shared<ScriptedStatus>(std::deque<int>{400},
                                            R"({"error": {"code": "context_length_exceeded"}})");
  ChatClient client(llm_endpoint(), t, [](auto) {});
  try {
    client.send(std::string(1234, 'x'), {}, SamplingParams{});
    FAIL();
  } catch (const ModelError& e) {
    EXPECT_NE(std::string(e.what()).find("1234"), std::string::npos);
  }
}

TEST(ChatClient, SendsBearerTokenFromEnvironment) {
  auto t = std::make_shared<ScriptedStatus>(std::deque<int>{200});
  EndpointConfig e = llm_endpoint();
  e.auth_env = "KEYCOMP_TEST_TOKEN";
  setenv("KEYCOMP_TEST_TOKEN", "sekret", 1);
  ChatClient(e, t, [](auto) {}).send("x", {}, SamplingParams{});
  unsetenv("KEYCOMP_TEST_TOKEN");
  bool found = false;
  for (const auto& [k, v] : t->last.headers) found = found || (k == "Authorization" && v == "Bearer sekret");
  EXPECT_TRUE(found);
  EXPECT_EQ(llm_endpoint().auth_variable(), "KEYCOMP_API_KEY_LLM");
}

TEST(EndpointConfig, Validation) {
  EndpointConfig e = llm_endpoint();
  e.timeout_seconds = 0;
  EXPECT_THROW(e.validate(), ConfigError);
  e = llm_endpoint();
  e.type = EndpointType::Http;
  EXPECT_THROW(e.validate(), ConfigError);
  EXPECT_THROW(parse_endpoint_type("grpc"), ConfigError);
  EXPECT_THROW(parse_replay_mode("sometimes"), ConfigError);
  EXPECT_EQ(parse_replay_mode("strict-replay"), ReplayMode::StrictReplay);
}

TEST(Mocks, RuleLlm) {
  RuleLlmTransport rule;
  auto ask = [&](const std::string& p) {
    HttpRequest r;
    r.body = build_chat_request(Role::LLM, "m", p, {}, SamplingParams{});
    return parse_chat_response(rule.post(r).body).text;
  };
  EXPECT_EQ(ask("Image description: a dog on a mat\nCaption A: a dog on a mat\nCaption B: a mat on a dog"),
            "Caption A. Its text appears verbatim in the given context.");
  EXPECT_EQ(ask("Caption: A MAT ON A DOG\nImage A: a dog on a mat\nImage B: a mat on a dog"),
            "Image B. Its text appears verbatim in the given context.");
  EXPECT_EQ(ask("nothing\nCaption A: x\nCaption B: y"), "Neither option matches.");
  EXPECT_EQ(ask("Caption A: x"), "Neither option can be evaluated.");
}

TEST(Mocks, EchoVlmAndScripted) {
  EchoVlmTransport echo;
  HttpRequest r;
  const std::vector<ImagePayload> img{{"GT:a red ball\nrest", "image/png"}};
  r.body = build_chat_request(Role::VLM, "m", "describe", img, SamplingParams{});
  EXPECT_EQ(parse_chat_response(echo.post(r).body).text, "a red ball");
  r.body = build_chat_request(Role::VLM, "m", "say GT: hi", img, SamplingParams{});
  EXPECT_EQ(parse_chat_response(echo.post(r).body).text, "hi");
  r.body = "not json";
  EXPECT_EQ(echo.post(r).status, 400);

  TempDir dir;
  write_text(dir / "s.jsonl", R"({"contains": "apple", "response": "Caption B"})"
                              "\n"
                              R"({"default": "Neither."})"
                              "\n");
  ScriptedTransport scripted(dir / "s.jsonl");
  r.body = build_chat_request(Role::LLM, "m", "an apple", {}, SamplingParams{});
  EXPECT_EQ(parse_chat_response(scripted.post(r).body).text, "Caption B");
  r.body = build_chat_request(Role::LLM, "m", "a pear", {}, SamplingParams{});
  EXPECT_EQ(parse_chat_response(scripted.post(r).body).text, "Neither.");

  write_text(dir / "strict.jsonl", R"({"contains": "apple", "response": "yes"})"
                                   "\n");
  ScriptedTransport strict(dir / "strict.jsonl");
  EXPECT_EQ(strict.post(r).status, 400);
  write_text(dir / "bad.jsonl", "{\"foo\": 1}\n");
  EXPECT_THROW(ScriptedTransport(dir / "bad.jsonl"), ParseError);
}

TEST(HttpTransport, TalksToAChatServer) {
  httplib::Server server;
  std::string seen_auth, seen_path;
  server.Post(R"(/v1/chat/completions)", [&](const httplib::Request& req, httplib::Response& res) {
    seen_auth = req.get_header_value("Authorization");
    seen_path = req.path;
    const auto view = parse_chat_request(req.body);
    res.set_content(make_chat_response(view.model, "echo: " + view.prompt), "application/json");
  });
  const int port = server.bind_to_any_port("127.0.0.1");
  std::thread th([&] { server.listen_after_bind(); });
  server.wait_until_ready();

  EndpointConfig e = EndpointConfig::for_role(Role::LLM);
  e.type = EndpointType::Http;
  e.base_url = fmt::format("http://127.0.0.1:{}/v1/", port);
  e.model_name = "remote";
  e.auth_env = "KEYCOMP_TEST_HTTP_TOKEN";
  setenv("KEYCOMP_TEST_HTTP_TOKEN", "abc", 1);
  ChatClient client(e, make_transport(e), [](auto) {});
  EXPECT_EQ(client.send("hello", {}, SamplingParams{}).text, "echo: hello");
  EXPECT_EQ(seen_auth, "Bearer abc");
  EXPECT_EQ(seen_path, "/v1/chat/completions");
  unsetenv("KEYCOMP_TEST_HTTP_TOKEN");
  server.stop();
  th.join();

  e.max_retries = 1;
  ChatClient dead(e, make_transport(e), [](auto) {});
  EXPECT_THROW(dead.send("hello", {}, SamplingParams{}), TransportError);
}

TEST(TranscriptStore, PersistsAndIndexes) {
  TempDir dir;
  {
    TranscriptStore store(dir / "j.jsonl");
    store.append(sample_transcript("k1"));
    store.append(sample_transcript("k2"));
    EXPECT_EQ(store.offset_of("k1"), 0u);
  }
  TranscriptStore reopened(dir / "j.jsonl");
  EXPECT_EQ(reopened.size(), 2u);
  EXPECT_EQ(reopened.find("k2"), sample_transcript("k2"));
  EXPECT_FALSE(reopened.find("k3").has_value());
  EXPECT_GT(*reopened.offset_of("k2"), 0u);
}

TEST(TranscriptStore, TornFinalLineIsIgnored) {
  TempDir dir;
  {
    TranscriptStore store(dir / "j.jsonl");
    store.append(sample_transcript("k1"));
  }
  {
    std::ofstream out(dir / "j.jsonl", std::ios::app);
    out << R"({"key": "k2", "role": "LL)";
  }
  EXPECT_EQ(TranscriptStore(dir / "j.jsonl").size(), 1u);

  write_text(dir / "bad.jsonl", "garbage\n" + to_json(sample_transcript("k")).dump() + "\n");
  EXPECT_THROW(TranscriptStore(dir / "bad.jsonl"), ParseError);
}

TEST(TranscriptStore, ConcurrentAppends) {
  TempDir dir;
  auto store = std::make_shared<TranscriptStore>(dir / "j.jsonl");
  auto other = std::make_shared<TranscriptStore>(dir / "j.jsonl");  // a second handle on the same file
  std::vector<std::thread> threads;
  for (int t = 0; t < 8; ++t) {
    threads.emplace_back([&, t] {
      for (int i = 0; i < 40; ++i) (t % 2 ? other : store)->append(sample_transcript(fmt::format("k{}-{}", t, i)));
    });
  }
  for (auto& th : threads) th.join();
  EXPECT_EQ(TranscriptStore(dir / "j.jsonl").size(), 320u);
}

TEST(TranscriptJson, RoundTrip) {
  ModelTranscript t = sample_transcript("k");
  t.role = Role::VLM;
  t.image_digest = "abc,def";
  t.params.num_beams = 10;
  t.params.sample_index = 4;
  t.usage = {1, 2, 3};
  EXPECT_EQ(transcript_from_json(to_json(t)), t);
  const auto j = to_json(t);
  for (const char* k : {"key", "role", "model", "prompt", "image_digest", "params", "response", "usage", "recorded_at"}) {
    EXPECT_TRUE(j.contains(k)) << k;
  }
}

class GatewayModes : public ::testing::Test {
 protected:
  void SetUp() override {
    write_text(dir / "img.png", "GT:a cat on a mat\n");
    image = ImageRef{"img", dir / "img.png", sha256_hex("GT:a cat on a mat\n")};
    counter = std::make_shared<CountingTransport>(std::make_shared<EchoVlmTransport>());
  }

  std::unique_ptr<Gateway> make(ReplayMode mode) {
    GatewayOptions o;
    o.mode = mode;
    o.store = std::make_shared<TranscriptStore>(dir / "journal.jsonl");
    o.clock = Clock::fixed("2024-01-01T00:00:00Z");
    auto g = std::make_unique<Gateway>(o);
    g->attach(vlm_endpoint(), counter);
    return g;
  }

  TempDir dir;
  ImageRef image;
  std::shared_ptr<CountingTransport> counter;
};

TEST_F(GatewayModes, RecordThenStrictReplay) {
  auto rec = make(ReplayMode::Record);
  const auto a = rec->describe_image(vlm_endpoint(), image, prompt("describe"), SamplingParams{});
  EXPECT_EQ(a.response_text, "a cat on a mat");
  EXPECT_EQ(a.recorded_at, "2024-01-01T00:00:00Z");
  rec->describe_image(vlm_endpoint(), image, prompt("describe"), SamplingParams{});
  EXPECT_EQ(counter->calls(), 1u);

  counter->reset();
  auto strict = make(ReplayMode::StrictReplay);
  EXPECT_EQ(strict->describe_image(vlm_endpoint(), image, prompt("describe"), SamplingParams{}), a);
  EXPECT_EQ(counter->calls(), 0u);
  EXPECT_THROW(strict->describe_image(vlm_endpoint(), image, prompt("other"), SamplingParams{}), ReplayMissError);
  EXPECT_EQ(counter->calls(), 0u);
}

TEST_F(GatewayModes, ReplayFallsThroughWithoutJournaling) {
  auto replay = make(ReplayMode::Replay);
  replay->describe_image(vlm_endpoint(), image, prompt("describe"), SamplingParams{});
  EXPECT_EQ(counter->calls(), 1u);
  EXPECT_EQ(replay->store()->size(), 0u);
}

TEST_F(GatewayModes, LiveAlwaysCallsAndJournals) {
  auto live = make(ReplayMode::Live);
  live->describe_image(vlm_endpoint(), image, prompt("describe"), SamplingParams{});
  live->describe_image(vlm_endpoint(), image, prompt("describe"), SamplingParams{});
  EXPECT_EQ(counter->calls(), 2u);
  EXPECT_EQ(live->store()->size(), 1u);
}

TEST_F(GatewayModes, SamplesAndRoles) {
  auto g = make(ReplayMode::Record);
  const auto samples = g->sample_descriptions(vlm_endpoint(), image, prompt("describe"), 5, SamplingParams{});
  ASSERT_EQ(samples.size(), 5u);
  for (int i = 0; i < 5; ++i) EXPECT_EQ(samples[static_cast<std::size_t>(i)].params.sample_index, i);
  EXPECT_EQ(samples[0], g->describe_image(vlm_endpoint(), image, prompt("describe"), SamplingParams{}));
  EXPECT_EQ(counter->calls(), 5u);
  EXPECT_THROW(g->complete(vlm_endpoint(), prompt("x"), SamplingParams{}), ConfigError);
  EXPECT_THROW(g->describe_image(llm_endpoint(), image, prompt("x"), SamplingParams{}), ConfigError);

  const std::array<ImageRef, 2> both{image, image};
  const auto t = g->ask_vlm(vlm_endpoint(), both, prompt("describe"), SamplingParams{});
  EXPECT_EQ(t.image_digest, image.digest + "," + image.digest);
}
