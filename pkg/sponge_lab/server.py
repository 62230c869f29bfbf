"""
MCP service for sponge-lab.

This module provides the SpongeLabMCP class, which mounts an MCP server on a
FastAPI application so agents can list trained checkpoints, request their
zero-skipping energy reports and simulate battery drain without the CLI.
"""

import json
import logging
from collections.abc import Callable
from pathlib import Path
from typing import Any

from fastapi import FastAPI
from mcp.server.fastmcp import FastMCP
from starlette.requests import Request
from starlette.responses import Response
from starlette.types import Message, Receive, Scope, Send

from .config import BatteryModel, validated
from .data import synth_dataset
from .energy import SkipRule, energy_report
from .errors import SpongeError
from .experiments import simulate_streaming
from .models import Model, load_checkpoint

logger = logging.getLogger(__name__)

CORS_HEADERS = {
    "Access-Control-Allow-Origin": "*",
    "Access-Control-Allow-Methods": "GET, POST, OPTIONS",
    "Access-Control-Allow-Headers": "*",
}
PREFLIGHT_HEADERS = {**CORS_HEADERS, "Access-Control-Max-Age": "86400"}

_CHECKPOINT_ARGS = {
    "checkpoint": {"type": "string", "description": "Checkpoint file name"},
    "samples": {
        "type": "integer",
        "description": "Synthetic inputs to evaluate",
        "default": 64,
    },
    "seed": {"type": "integer", "description": "Seed of the synthetic inputs", "default": 0},
    "skip_rule": {
        "type": "string",
        "description": "Zero-skipping rule",
        "enum": [rule.value for rule in SkipRule],
        "default": SkipRule.SKIP_ON_ZERO_ACTIVATION.value,
    },
}


def _json_response(data: Any, status_code: int = 200) -> Response:
    return Response(
        content=json.dumps(data),
        status_code=status_code,
        media_type="application/json",
        headers=CORS_HEADERS,
    )


def _rpc_error(request_id: Any, code: int, message: str) -> dict[str, Any]:
    return {"jsonrpc": "2.0", "id": request_id, "error": {"code": code, "message": message}}


class SpongeLabMCP:
    """
    Exposes sponge-lab checkpoints as MCP tools on a FastAPI application.

    Tools read checkpoints from a single directory; tool arguments name a
    checkpoint by file name only.
    """

    def __init__(
        self,
        app: FastAPI,
        checkpoint_dir: str | Path,
        mount_path: str = "/mcp",
        server_name: str = "sponge-lab-mcp",
        server_version: str = "0.1.0",
        section_name: str = "mcp",
        list_checkpoints_tool_name: str = "listCheckpoints",
        energy_report_tool_name: str = "energyReport",
        simulate_streaming_tool_name: str = "simulateStreaming",
    ):
        """
        Initialize the service and mount it on ``app``.

        Args:
            app: The FastAPI application to mount on
            checkpoint_dir: Directory holding ``*.ckpt`` files
            mount_path: The path where the MCP server will be mounted
            server_name: Name of the MCP server
            server_version: Version of the MCP server
            section_name: Name of the section in documentation for MCP endpoints
        """
        self.app = app
        self.checkpoint_dir = Path(checkpoint_dir)
        self.mount_path = mount_path
        self.server_name = server_name
        self.server_version = server_version
        self.section_name = section_name
        self.mcp_server = FastMCP(server_name)
        self.list_checkpoints_tool_name = list_checkpoints_tool_name
        self.energy_report_tool_name = energy_report_tool_name
        self.simulate_streaming_tool_name = simulate_streaming_tool_name

        # tool name -> callable returning a JSON string, used by the HTTP handler
        self._tools: dict[str, Callable[..., str]] = {}

        self._register_tools()
        self._mount_mcp_server()

    def checkpoint_names(self) -> list[str]:
        return sorted(path.name for path in self.checkpoint_dir.glob("*.ckpt"))

    def _load(self, checkpoint: str) -> Model | dict[str, Any]:
        """Load a checkpoint by file name, or return an error payload."""
        available = self.checkpoint_names()
        if checkpoint not in available:
            return {
                "error": f"Checkpoint {checkpoint} not found",
                "available_checkpoints": available,
            }
        return load_checkpoint(self.checkpoint_dir / checkpoint)

    def _parse_rule(self, skip_rule: str) -> SkipRule | dict[str, Any]:
        try:
            return SkipRule(skip_rule)
        except ValueError:
            return {
                "error": f"Unknown skip rule {skip_rule}",
                "available_skip_rules": [rule.value for rule in SkipRule],
            }

    def _register_tools(self) -> None:
        """Register the MCP tools."""

        @self.mcp_server.tool(name=self.list_checkpoints_tool_name)
        def list_checkpoints() -> str:
            """
            List the checkpoints in the checkpoint directory.

            Returns:
                JSON string with each checkpoint's geometry and parameter count
            """
            checkpoints = []
            for name in self.checkpoint_names():
                try:
                    model = load_checkpoint(self.checkpoint_dir / name)
                except SpongeError as e:
                    checkpoints.append({"name": name, "error": str(e)})
                    continue
                checkpoints.append(
                    {
                        "name": name,
                        "input_shape": list(model.input_shape),
                        "num_classes": model.num_classes,
                        "param_count": model.param_count,
                        "layers": [layer.kind.value for layer in model.layers],
                    }
                )
            return json.dumps({"checkpoints": checkpoints}, indent=2)

        self._tools[self.list_checkpoints_tool_name] = list_checkpoints

        @self.mcp_server.tool(name=self.energy_report_tool_name)
        def energy_report_tool(
            checkpoint: str,
            samples: int = 64,
            seed: int = 0,
            skip_rule: str = SkipRule.SKIP_ON_ZERO_ACTIVATION.value,
        ) -> str:
            """
            Zero-skipping energy report of a checkpoint on synthetic inputs.

            Args:
                checkpoint: Checkpoint file name
                samples: Number of synthetic inputs
                seed: Seed of the synthetic inputs
                skip_rule: Which zero operands gate a MAC

            Returns:
                JSON string with per-layer MAC counts and the energy ratio
            """
            model = self._load(checkpoint)
            rule = self._parse_rule(skip_rule)
            if isinstance(model, dict):
                return json.dumps(model, indent=2)
            if isinstance(rule, dict):
                return json.dumps(rule, indent=2)
            if samples < 1:
                return json.dumps({"error": "samples must be positive"}, indent=2)
            batch = synth_dataset(samples, model.num_classes, model.input_shape, seed)
            report = energy_report(model, batch.images, rule)
            return json.dumps(report.to_json_dict(), indent=2)

        self._tools[self.energy_report_tool_name] = energy_report_tool

        @self.mcp_server.tool(name=self.simulate_streaming_tool_name)
        def simulate_streaming_tool(
            checkpoint: str,
            epochs: int = 10,
            samples: int = 64,
            seed: int = 0,
            joules_per_mac: float = 1e-9,
            skip_rule: str = SkipRule.SKIP_ON_ZERO_ACTIVATION.value,
        ) -> str:
            """
            Simulated battery drain of continuous inference with a checkpoint.

            Returns:
                JSON string with per-epoch and cumulative battery percentages
            """
            model = self._load(checkpoint)
            rule = self._parse_rule(skip_rule)
            if isinstance(model, dict):
                return json.dumps(model, indent=2)
            if isinstance(rule, dict):
                return json.dumps(rule, indent=2)
            if samples < 1 or epochs < 1:
                return json.dumps({"error": "samples and epochs must be positive"}, indent=2)
            try:
                battery = validated(BatteryModel, joules_per_mac=joules_per_mac)
            except SpongeError as e:
                return json.dumps({"error": str(e)}, indent=2)
            val_set = synth_dataset(samples, model.num_classes, model.input_shape, seed)
            report = simulate_streaming(model, val_set, battery, rule, epochs)
            return report.model_dump_json(indent=2)

        self._tools[self.simulate_streaming_tool_name] = simulate_streaming_tool

    def tool_descriptions(self) -> list[dict[str, Any]]:
        """Tool entries for ``tools/list``."""
        return [
            {
                "name": self.list_checkpoints_tool_name,
                "description": "List trained checkpoints with their geometry",
                "inputSchema": {"type": "object", "properties": {}, "required": []},
            },
            {
                "name": self.energy_report_tool_name,
                "description": "Zero-skipping energy report of a checkpoint",
                "inputSchema": {
                    "type": "object",
                    "properties": _CHECKPOINT_ARGS,
                    "required": ["checkpoint"],
                },
            },
            {
                "name": self.simulate_streaming_tool_name,
                "description": "Simulated battery drain of continuous inference",
                "inputSchema": {
                    "type": "object",
                    "properties": {
                        **_CHECKPOINT_ARGS,
                        "epochs": {
                            "type": "integer",
                            "description": "Passes over the inputs",
                            "default": 10,
                        },
                        "joules_per_mac": {
                            "type": "number",
                            "description": "Energy of one executed MAC",
                            "default": 1e-9,
                        },
                    },
                    "required": ["checkpoint"],
                },
            },
        ]

    def _handle_rpc(self, mcp_request: dict[str, Any]) -> dict[str, Any]:
        """Dispatch one JSON-RPC message."""
        request_id = mcp_request.get("id")
        method = mcp_request.get("method")

        if method == "initialize":
            return {
                "jsonrpc": "2.0",
                "id": request_id,
                "result": {
                    "protocolVersion": "2024-11-05",
                    "serverInfo": {"name": self.server_name, "version": self.server_version},
                    "capabilities": {"tools": {}},
                },
            }
        if method == "tools/list":
            return {
                "jsonrpc": "2.0",
                "id": request_id,
                "result": {"tools": self.tool_descriptions()},
            }
        if method == "tools/call":
            params = mcp_request.get("params", {})
            tool_name = params.get("name")
            tool_args = params.get("arguments", {})
            tool = self._tools.get(tool_name) if isinstance(tool_name, str) else None
            if tool is None:
                result_content = json.dumps({"error": f"Unknown tool: {tool_name}"})
            else:
                try:
                    result_content = tool(**tool_args)
                except TypeError as e:
                    result_content = json.dumps({"error": f"Invalid arguments: {e}"})
                except SpongeError as e:
                    result_content = json.dumps({"error": str(e)})
            return {
                "jsonrpc": "2.0",
                "id": request_id,
                "result": {"content": [{"type": "text", "text": result_content}]},
            }
        return _rpc_error(request_id, -32601, f"Method not found: {method}")

    def _mount_mcp_server(self) -> None:
        """Mount the MCP protocol handler, a direct route and a health endpoint."""

        async def handle_mcp_request(scope: Scope, receive: Receive, send: Send) -> None:
            """Handle MCP protocol requests."""
            if scope["type"] != "http":
                await Response("Not Found", status_code=404)(scope, receive, send)
                return

            request = Request(scope, receive)
            if request.method == "OPTIONS":
                response = Response(status_code=200, headers=PREFLIGHT_HEADERS)
            elif request.method == "GET":
                if request.query_params.get("transportType"):
                    response = _json_response(
                        {
                            "name": self.server_name,
                            "version": self.server_version,
                            "transport": "streamable-http",
                            "capabilities": {"tools": {}},
                        }
                    )
                else:
                    response = _json_response(
                        {
                            "name": self.server_name,
                            "version": self.server_version,
                            "protocol": "mcp",
                            "mount_path": self.mount_path,
                            "tools": list(self._tools),
                        }
                    )
            elif request.method == "POST":
                try:
                    body = await request.body()
                    if not body:
                        response_data = _rpc_error(None, -32600, "Invalid Request")
                    else:
                        try:
                            mcp_request = json.loads(body.decode())
                        except json.JSONDecodeError:
                            response_data = _rpc_error(None, -32700, "Parse error")
                        else:
                            response_data = self._handle_rpc(mcp_request)
                except Exception as e:
                    logger.exception("MCP request failed")
                    response_data = _rpc_error(None, -32603, f"Internal error: {str(e)}")
                response = _json_response(response_data)
            else:
                response = Response("Method Not Allowed", status_code=405)

            await response(scope, receive, send)

        self.app.mount(self.mount_path, handle_mcp_request)

        # Also register a direct route to avoid the mount's trailing-slash redirect
        @self.app.post(self.mount_path, tags=[self.section_name])
        @self.app.get(self.mount_path, tags=[self.section_name])
        @self.app.options(self.mount_path, tags=[self.section_name])
        async def mcp_direct_handler(request: Request) -> Response:
            """Direct handler for MCP requests to avoid redirects."""
            scope = {
                "type": "http",
                "method": request.method,
                "path": self.mount_path,
                "query_string": str(request.url.query).encode(),
                "headers": [(k.encode(), v.encode()) for k, v in request.headers.items()],
            }
            body = await request.body()

            async def receive() -> dict[str, Any]:
                return {"type": "http.request", "body": body, "more_body": False}

            response_body = b""
            response_status = 200
            response_headers: list[tuple[bytes, bytes]] = []

            async def send(message: Message) -> None:
                nonlocal response_body, response_status, response_headers
                if message["type"] == "http.response.start":
                    response_status = message["status"]
                    response_headers = message.get("headers", [])
                elif message["type"] == "http.response.body":
                    response_body += message.get("body", b"")

            await handle_mcp_request(scope, receive, send)

            headers = {k.decode(): v.decode() for k, v in response_headers}
            headers.pop("content-length", None)
            return Response(content=response_body, status_code=response_status, headers=headers)

        @self.app.get("/health", tags=[self.section_name])
        @self.app.options("/health", tags=[self.section_name])
        async def health_endpoint(request: Request) -> Response:
            """Health check endpoint for MCP clients."""
            if request.method == "OPTIONS":
                return Response(status_code=200, headers=PREFLIGHT_HEADERS)
            return _json_response(
                {
                    "status": "healthy",
                    "server": self.server_name,
                    "version": self.server_version,
                    "mcp_endpoint": self.mount_path,
                    "checkpoints": len(self.checkpoint_names()),
                }
            )

    def get_mcp_info(self) -> dict[str, Any]:
        """
        Get information about the mounted MCP server.

        Returns:
            Dictionary containing MCP server information
        """
        return {
            "server_name": self.server_name,
            "server_version": self.server_version,
            "mount_path": self.mount_path,
            "section_name": self.section_name,
            "checkpoint_dir": str(self.checkpoint_dir),
            "mcp_endpoint": f"{self.mount_path}/",
            "health_endpoint": "/health",
            "tools": [
                {"name": tool["name"], "description": tool["description"]}
                for tool in self.tool_descriptions()
            ],
        }
