//! Request/response bodies for the chat-completion and embedding wire
//! formats.

use super::{ChatRequest, ClientError, TokenUsage};
use base64::Engine;
use serde_json::{json, Value};

/// Build the chat-completions request body. The user message content is a
/// parts list: one text part, plus one image-url part (base64 data URL)
/// when an image is attached.
pub fn chat_body(model: &str, request: &ChatRequest) -> Value {
    let mut content = vec![json!({"type": "text", "text": request.prompt})];
    if let Some(image) = &request.image {
        let encoded = base64::engine::general_purpose::STANDARD.encode(&image.bytes);
        content.push(json!({
            "type": "image_url",
            "image_url": {"url": format!("data:{};base64,{encoded}", image.media_type)}
        }));
    }
    let mut messages = Vec::new();
    if let Some(system) = &request.system {
        messages.push(json!({"role": "system", "content": system}));
    }
    messages.push(json!({"role": "user", "content": content}));
    json!({
        "model": model,
        "messages": messages,
        "temperature": request.params.temperature,
        "max_tokens": request.params.max_tokens,
        "top_p": request.params.top_p,
        "frequency_penalty": request.params.frequency_penalty,
        "presence_penalty": request.params.presence_penalty,
    })
}

/// Extract `choices[0].message.content` (untrimmed) and optional usage.
pub fn parse_chat_response(value: &Value) -> Result<(String, Option<TokenUsage>), ClientError> {
    let text = value
        .get("choices")
        .and_then(|c| c.get(0))
        .and_then(|c| c.get("message"))
        .and_then(|m| m.get("content"))
        .and_then(Value::as_str)
        .ok_or_else(|| ClientError::MalformedResponse("missing choices[0].message.content".into()))?
        .to_string();
    let usage = value
        .get("usage")
        .and_then(|u| serde_json::from_value(u.clone()).ok());
    Ok((text, usage))
}

pub fn embedding_body(model: &str, input: &str) -> Value {
    json!({"model": model, "input": input})
}

/// Extract `data[0].embedding`.
pub fn parse_embedding_response(value: &Value) -> Result<Vec<f64>, ClientError> {
    value
        .get("data")
        .and_then(|d| d.get(0))
        .and_then(|d| d.get("embedding"))
        .and_then(Value::as_array)
        .map(|values| {
            values
                .iter()
                .filter_map(Value::as_f64)
                .collect::<Vec<f64>>()
        })
        .filter(|v: &Vec<f64>| !v.is_empty())
        .ok_or_else(|| ClientError::MalformedResponse("missing data[0].embedding".into()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::client::ImageData;
    use crate::prompts::JudgeParams;

    #[test]
    fn chat_body_with_image_uses_data_url() {
        let request = ChatRequest {
            prompt: "classify".into(),
            image: Some(ImageData {
                bytes: b"png-bytes".to_vec(),
                media_type: "image/png".into(),
            }),
            params: JudgeParams::default(),
            system: None,
        };
        let body = chat_body("m", &request);
        assert_eq!(body["model"], "m");
        assert_eq!(body["temperature"], 0.2);
        assert_eq!(body["max_tokens"], 64);
        let content = &body["messages"][0]["content"];
        assert_eq!(content[0]["type"], "text");
        assert_eq!(content[1]["type"], "image_url");
        let url = content[1]["image_url"]["url"].as_str().unwrap();
        assert!(url.starts_with("data:image/png;base64,"));
        let decoded = base64::engine::general_purpose::STANDARD
            .decode(url.strip_prefix("data:image/png;base64,").unwrap())
            .unwrap();
        assert_eq!(decoded, b"png-bytes");
    }

    #[test]
    fn judge_body_has_no_image_part() {
        let request = ChatRequest::text("judge this", JudgeParams::default());
        let body = chat_body("m", &request);
        assert_eq!(body["messages"][0]["content"].as_array().unwrap().len(), 1);
    }

    #[test]
    fn system_message_prepended_when_configured() {
        let mut request = ChatRequest::text("q", JudgeParams::default());
        request.system = Some("be terse".into());
        let body = chat_body("m", &request);
        assert_eq!(body["messages"][0]["role"], "system");
        assert_eq!(body["messages"][1]["role"], "user");
    }

    #[test]
    fn parse_chat_and_errors() {
        let good = serde_json::json!({
            "choices": [{"message": {"content": " hi "}}],
            "usage": {"prompt_tokens": 3, "completion_tokens": 2, "total_tokens": 5}
        });
        let (text, usage) = parse_chat_response(&good).unwrap();
        assert_eq!(text, " hi ");
        assert_eq!(usage.unwrap().total_tokens, 5);
        let bad = serde_json::json!({"choices": []});
        assert!(parse_chat_response(&bad).is_err());
    }

    #[test]
    fn parse_embedding_and_errors() {
        let good = serde_json::json!({"data": [{"embedding": [0.25, -1.0]}]});
        assert_eq!(parse_embedding_response(&good).unwrap(), vec![0.25, -1.0]);
        let bad = serde_json::json!({"data": []});
        assert!(parse_embedding_response(&bad).is_err());
    }
}
